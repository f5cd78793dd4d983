"""Dataset engineering: annotation parsing, valence/arousal alignment,
face-candidate selection, identity-closed splitting, distribution statistics
and the packed binary sample container.

Annotation text format (one record per line, whitespace separated):

    frame  p1 i1  p2 i2  ...  p8 i8  valence  arousal

with p/i the presence flag and intensity of the 8 tracked action units in
the order 1, 2, 4, 6, 12, 15, 20, 25.  Lines starting with '#' are comments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .metrics import AU_IDS, NUM_AUS

CONTAINER_MAGIC = b"AFDS"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHHHHIQ")  # magic, version, H, W, C, reserved, count
_SAMPLE_TAIL = struct.Struct("<8s8sff")  # presence, intensity, valence, arousal


class AnnotationError(ValueError):
    pass


class ContainerError(ValueError):
    pass


@dataclass
class AnnotationRecord:
    """Per-frame labels: AU presence/intensity plus valence and arousal."""

    frame: int
    au_presence: np.ndarray
    au_intensity: np.ndarray
    valence: float
    arousal: float

    def __post_init__(self):
        self.au_presence = np.asarray(self.au_presence, dtype=np.uint8)
        self.au_intensity = np.asarray(self.au_intensity, dtype=np.uint8)
        if self.au_presence.shape != (NUM_AUS,) \
                or self.au_intensity.shape != (NUM_AUS,):
            raise AnnotationError("expected 8 presence and 8 intensity values")


@dataclass
class VideoMeta:
    """One source video: identity, frame count and AU totals for splitting."""

    video_id: str
    identity_id: str
    frame_count: int
    fps: float = 30.0
    au_counts: np.ndarray | None = None

    def __post_init__(self):
        if not str(self.identity_id):
            raise ValueError(f"video {self.video_id} has no identity")
        if self.au_counts is not None:
            self.au_counts = np.asarray(self.au_counts, dtype=np.int64)


@dataclass
class LandmarkCandidate:
    """Four reference points bounding one face-crop proposal."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (4, 2):
            raise ValueError(f"expected four 2-D points, got {self.points.shape}")

    @property
    def center(self) -> np.ndarray:
        return self.points.mean(axis=0)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _parse_lines(stream, with_va: bool) -> list[AnnotationRecord]:
    n_fields = 1 + 2 * NUM_AUS + (2 if with_va else 0)
    records: dict[int, AnnotationRecord] = {}
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        fields = text.split()
        if len(fields) != n_fields:
            raise AnnotationError(
                f"line {lineno}: expected {n_fields} fields, "
                f"got {len(fields)}"
            )
        try:
            frame = int(fields[0])
            pairs = [int(v) for v in fields[1:1 + 2 * NUM_AUS]]
            valence = float(fields[-2]) if with_va else 0.0
            arousal = float(fields[-1]) if with_va else 0.0
        except ValueError as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from None
        if frame < 0:
            raise AnnotationError(f"line {lineno}: negative frame {frame}")
        if frame in records:
            raise AnnotationError(f"line {lineno}: duplicate frame {frame}")
        presence = np.array(pairs[0::2])
        intensity = np.array(pairs[1::2])
        if not np.isin(presence, (0, 1)).all():
            raise AnnotationError(
                f"line {lineno}: presence flags must be 0 or 1")
        if ((presence == 1) != (intensity > 0)).any():
            raise AnnotationError(
                f"line {lineno}: intensity must be positive exactly when "
                f"the action unit is present")
        if abs(valence) > 1.0 or abs(arousal) > 1.0:
            raise AnnotationError(
                f"line {lineno}: valence/arousal outside [-1, 1]")
        records[frame] = AnnotationRecord(frame, presence, intensity,
                                          valence, arousal)
    return [records[k] for k in sorted(records)]


def parse_annotations(stream) -> list[AnnotationRecord]:
    """Parse the combined annotation format into frame-ordered records.

    `stream` is an iterable of lines (an open file works).  Malformed lines,
    duplicate frames, out-of-range values and presence/intensity mismatches
    all raise AnnotationError naming the offending line number.
    """
    return _parse_lines(stream, with_va=True)


def parse_au_annotations(stream) -> list[AnnotationRecord]:
    """Parse the AU-only format (no trailing valence/arousal columns);
    both affect values come back as 0 until a VA series is merged in."""
    return _parse_lines(stream, with_va=False)


# ---------------------------------------------------------------------------
# valence/arousal resampling
# ---------------------------------------------------------------------------

def interpolate_va(values, src_fps: float, dst_fps: float = 30.0) -> np.ndarray:
    """Linearly resample a per-frame series onto the destination frame rate.

    Endpoints are preserved exactly; a single input value degenerates to a
    single output value.
    """
    if src_fps <= 0 or dst_fps <= 0:
        raise ValueError("frame rates must be positive")
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n == 0:
        raise ValueError("no values to interpolate")
    if n == 1:
        return values.copy()
    duration = (n - 1) / src_fps
    out_n = int(round(duration * dst_fps)) + 1
    src_t = np.arange(n) / src_fps
    dst_t = np.arange(out_n) / dst_fps
    return np.interp(dst_t, src_t, values)


def align_lengths(va, target_len: int) -> np.ndarray:
    """Reconcile the resampled series with the annotation timeline.

    Interpolation can come out at most two entries long or short; longer
    series are cropped at the end, shorter ones extended by repeating the
    final value.  A larger discrepancy signals a wrong source frame rate.
    """
    va = np.asarray(va, dtype=np.float64)
    gap = len(va) - target_len
    if abs(gap) > 2:
        raise ValueError(
            f"series of {len(va)} entries is {abs(gap)} away from the "
            f"{target_len}-frame annotation timeline; check the source fps"
        )
    if gap > 0:
        return va[:target_len].copy()
    if gap < 0:
        return np.concatenate([va, np.repeat(va[-1], -gap)])
    return va.copy()


# ---------------------------------------------------------------------------
# face-candidate selection
# ---------------------------------------------------------------------------

def select_face(candidates: list[LandmarkCandidate],
                prev_center=None) -> LandmarkCandidate:
    """Pick the candidate whose centre is nearest the previous frame's face.

    Without a previous centre (first detection) the first candidate wins;
    exact distance ties also go to the lowest index.
    """
    if not candidates:
        raise ValueError("no face candidates for this frame")
    if len(candidates) == 1 or prev_center is None:
        return candidates[0]
    prev = np.asarray(prev_center, dtype=np.float64)
    distances = [float(np.linalg.norm(c.center - prev)) for c in candidates]
    return candidates[int(np.argmin(distances))]


# ---------------------------------------------------------------------------
# identity-closed splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitReport:
    train_ids: list[str]
    test_ids: list[str]
    train_fraction: float
    au_train_pct: np.ndarray
    au_test_pct: np.ndarray
    au_gaps: np.ndarray
    max_gap: float
    trials_run: int

    def gap_lines(self) -> list[str]:
        lines = []
        for au, tr, te, gap in zip(AU_IDS, self.au_train_pct,
                                   self.au_test_pct, self.au_gaps):
            lines.append(f"AU {au}: train {tr:.2f}% test {te:.2f}% "
                         f"gap {gap:.2f}%")
        return lines


def _au_percentages(videos: list[VideoMeta]) -> np.ndarray:
    counts = np.zeros(NUM_AUS, dtype=np.int64)
    for v in videos:
        if v.au_counts is not None:
            counts += v.au_counts
    total = counts.sum()
    if total == 0:
        return np.zeros(NUM_AUS)
    return counts / total * 100.0


def split_dataset(videos: list[VideoMeta], target_fraction: float = 0.8,
                  seed: int = 0, trials: int = 1000,
                  fraction_window: tuple = (0.78, 0.86)) -> SplitReport:
    """Partition videos into train/test keeping each identity on one side.

    Identity groups are drawn at random into the training side until it
    holds `target_fraction` of the frames; the trial whose per-AU label
    percentages differ least between the sides (smallest maximum gap) is
    kept.  Trials whose training fraction falls outside `fraction_window`
    are discarded.
    """
    if not videos:
        raise ValueError("no videos to split")
    total_frames = sum(v.frame_count for v in videos)
    if total_frames <= 0:
        raise ValueError("total frame count must be positive")

    groups: dict[str, list[VideoMeta]] = {}
    for v in videos:
        groups.setdefault(str(v.identity_id), []).append(v)
    group_ids = sorted(groups)
    group_frames = {g: sum(v.frame_count for v in groups[g]) for g in group_ids}

    lo, hi = fraction_window
    biggest = max(group_frames.values())
    if biggest / total_frames > hi:
        raise ValueError(
            f"one identity owns {biggest / total_frames:.1%} of the frames; "
            f"no identity-closed split can stay under {hi:.0%}"
        )

    rng = np.random.default_rng(seed)
    best: SplitReport | None = None
    for trial in range(trials):
        order = rng.permutation(len(group_ids))
        train_groups: list[str] = []
        frames = 0
        for gi in order:
            if frames >= target_fraction * total_frames:
                break
            g = group_ids[gi]
            train_groups.append(g)
            frames += group_frames[g]
        fraction = frames / total_frames
        if not lo <= fraction <= hi:
            continue
        train_set = set(train_groups)
        train_videos = [v for v in videos if str(v.identity_id) in train_set]
        test_videos = [v for v in videos if str(v.identity_id) not in train_set]
        if not test_videos:
            continue
        tr_pct = _au_percentages(train_videos)
        te_pct = _au_percentages(test_videos)
        gaps = np.abs(tr_pct - te_pct)
        max_gap = float(gaps.max())
        if best is None or max_gap < best.max_gap:
            best = SplitReport(
                train_ids=sorted(v.video_id for v in train_videos),
                test_ids=sorted(v.video_id for v in test_videos),
                train_fraction=fraction,
                au_train_pct=tr_pct, au_test_pct=te_pct, au_gaps=gaps,
                max_gap=max_gap, trials_run=trial + 1)
    if best is None:
        raise ValueError(
            f"no identity-closed split with a training fraction in "
            f"[{lo}, {hi}] found in {trials} trials"
        )
    best.trials_run = trials
    return best


# ---------------------------------------------------------------------------
# distribution statistics
# ---------------------------------------------------------------------------

@dataclass
class StatsReport:
    au_counts: dict
    au_pct: dict
    va_histograms: dict
    scatter: dict
    bin_edges: np.ndarray
    record_counts: dict

    def au_csv(self) -> str:
        lines = ["split,au,count,percentage"]
        for split in self.au_counts:
            for j, au in enumerate(AU_IDS):
                lines.append(f"{split},{au},{self.au_counts[split][j]},"
                             f"{self.au_pct[split][j]:.2f}")
        return "\n".join(lines) + "\n"

    def histogram_csv(self) -> str:
        centers = (self.bin_edges[:-1] + self.bin_edges[1:]) / 2
        lines = ["split,series,bin_center,count"]
        for split, (v_hist, a_hist) in self.va_histograms.items():
            for series, hist in (("valence", v_hist), ("arousal", a_hist)):
                for c, n in zip(centers, hist):
                    lines.append(f"{split},{series},{c:.4f},{n}")
        return "\n".join(lines) + "\n"


def compute_stats(records_by_split: dict, bins: int = 40) -> StatsReport:
    """Per-AU counts/percentages, VA histograms and per-AU VA scatter points.

    `records_by_split` maps split names to lists of AnnotationRecord; a
    synthetic "total" split aggregating everything is added to the report.
    """
    groups = dict(records_by_split)
    groups["total"] = [r for recs in records_by_split.values() for r in recs]
    edges = np.linspace(-1.0, 1.0, bins + 1)

    au_counts, au_pct, histograms, record_counts = {}, {}, {}, {}
    scatter = {au: [] for au in AU_IDS}
    for split, recs in groups.items():
        counts = np.zeros(NUM_AUS, dtype=np.int64)
        valences = np.array([r.valence for r in recs])
        arousals = np.array([r.arousal for r in recs])
        for r in recs:
            counts += r.au_presence
        total = counts.sum()
        au_counts[split] = counts
        au_pct[split] = counts / total * 100.0 if total else np.zeros(NUM_AUS)
        v_hist, _ = np.histogram(valences, bins=edges)
        a_hist, _ = np.histogram(arousals, bins=edges)
        histograms[split] = (v_hist, a_hist)
        record_counts[split] = len(recs)
    for r in groups["total"]:
        for j, au in enumerate(AU_IDS):
            if r.au_presence[j]:
                scatter[au].append((r.valence, r.arousal))
    return StatsReport(au_counts=au_counts, au_pct=au_pct,
                       va_histograms=histograms, scatter=scatter,
                       bin_edges=edges, record_counts=record_counts)


# ---------------------------------------------------------------------------
# packed container
# ---------------------------------------------------------------------------

def pack_dataset(images: np.ndarray, records: list[AnnotationRecord],
                 path) -> None:
    """Write images and labels to the binary container.

    Images are [N, H, W, C] uint8.  Layout: 24-byte header (magic "AFDS",
    version u16, height/width/channels u16, reserved u32, count u64), then
    per sample the raw image bytes, 8 presence bytes, 8 intensity bytes and
    two f32 values for valence and arousal, all little-endian.
    """
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise ContainerError(
            f"images must be [N, H, W, C] uint8, got {images.dtype} "
            f"{images.shape}"
        )
    if len(images) != len(records):
        raise ContainerError(
            f"{len(images)} images but {len(records)} records"
        )
    n, h, w, c = images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION,
                              h, w, c, 0, n))
        for img, rec in zip(images, records):
            fh.write(img.tobytes())
            fh.write(_SAMPLE_TAIL.pack(rec.au_presence.tobytes(),
                                       rec.au_intensity.tobytes(),
                                       rec.valence, rec.arousal))


def read_dataset(path):
    """Read a packed container back into (images, records).

    The container stores no frame numbers; reconstructed records are
    numbered by their position.  Truncation and header mismatches raise
    ContainerError with the failing byte offset.
    """
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ContainerError(
                f"truncated header: {len(head)} of {_HEADER.size} bytes")
        magic, version, h, w, c, _, count = _HEADER.unpack(head)
        if magic != CONTAINER_MAGIC:
            raise ContainerError(f"bad magic {magic!r} at offset 0")
        if version != CONTAINER_VERSION:
            raise ContainerError(f"unsupported container version {version}")
        img_bytes = h * w * c
        sample_bytes = img_bytes + _SAMPLE_TAIL.size
        payload = fh.read()
    expected = count * sample_bytes
    if len(payload) != expected:
        raise ContainerError(
            f"payload is {len(payload)} bytes, expected {expected} "
            f"(offset {_HEADER.size + len(payload)})"
        )
    images = np.empty((count, h, w, c), dtype=np.uint8)
    records = []
    for i in range(count):
        base = i * sample_bytes
        images[i] = np.frombuffer(
            payload, dtype=np.uint8, count=img_bytes, offset=base
        ).reshape(h, w, c)
        presence, intensity, valence, arousal = _SAMPLE_TAIL.unpack_from(
            payload, base + img_bytes)
        records.append(AnnotationRecord(
            frame=i,
            au_presence=np.frombuffer(presence, dtype=np.uint8).copy(),
            au_intensity=np.frombuffer(intensity, dtype=np.uint8).copy(),
            valence=valence, arousal=arousal))
    return images, records


def to_training_arrays(images: np.ndarray, records: list[AnnotationRecord],
                       categories=None):
    """Normalise packed uint8 images to the generator's tanh range and
    bundle the labels for the trainer."""
    from .models import LabelBatch

    floats = images.astype(np.float64) / 127.5 - 1.0
    labels = LabelBatch(
        real_flag=np.zeros(len(records), dtype=np.int64),
        au=np.stack([r.au_presence for r in records]).astype(np.int64),
        valence=np.array([r.valence for r in records]),
        arousal=np.array([r.arousal for r in records]),
        category=None if categories is None
        else np.asarray(categories, dtype=np.int64))
    return floats, labels
