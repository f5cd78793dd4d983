"""Dataset pipeline: parsing, resampling, selection, splitting, packing."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catgan.dataset import (AnnotationError, AnnotationRecord, ContainerError,
                            LandmarkCandidate, VideoMeta, align_lengths,
                            compute_stats, interpolate_va, pack_dataset,
                            parse_annotations, read_dataset, select_face,
                            split_dataset, to_training_arrays)
from catgan.metrics import AU_IDS


def line(frame, present, v, a):
    """Build an annotation line with the given AU ids present."""
    cells = [str(frame)]
    for au in AU_IDS:
        flag = 1 if au in present else 0
        cells.extend([str(flag), str(flag)])
    cells.extend([str(v), str(a)])
    return " ".join(cells)


class TestParseAnnotations:
    def test_single_line(self):
        recs = parse_annotations([line(12, {1, 2}, 0.14, 0.20)])
        assert len(recs) == 1
        r = recs[0]
        assert r.frame == 12
        np.testing.assert_array_equal(r.au_presence, [1, 1, 0, 0, 0, 0, 0, 0])
        assert r.valence == pytest.approx(0.14)
        assert r.arousal == pytest.approx(0.20)

    def test_records_sorted_by_frame(self):
        recs = parse_annotations([line(5, set(), 0, 0), line(2, {4}, 0.1, 0.2)])
        assert [r.frame for r in recs] == [2, 5]

    def test_empty_file(self):
        assert parse_annotations(io.StringIO("")) == []

    def test_comments_and_blank_lines_skipped(self):
        text = "# header\n\n" + line(0, {6}, 0.5, -0.5) + "\n"
        assert len(parse_annotations(io.StringIO(text))) == 1

    def test_presence_without_intensity_rejected(self):
        bad = line(0, set(), 0, 0).split()
        bad[1] = "1"  # AU 1 present, intensity stays 0
        with pytest.raises(AnnotationError, match="line 1.*intensity"):
            parse_annotations([" ".join(bad)])

    def test_intensity_without_presence_rejected(self):
        bad = line(0, set(), 0, 0).split()
        bad[2] = "1"
        with pytest.raises(AnnotationError, match="intensity"):
            parse_annotations([" ".join(bad)])

    def test_duplicate_frame_rejected(self):
        with pytest.raises(AnnotationError, match="line 2.*duplicate"):
            parse_annotations([line(3, set(), 0, 0), line(3, set(), 0, 0)])

    def test_out_of_range_va_rejected(self):
        with pytest.raises(AnnotationError, match=r"\[-1, 1\]"):
            parse_annotations([line(0, set(), 1.5, 0)])

    def test_non_binary_presence_rejected(self):
        bad = line(0, set(), 0, 0).split()
        bad[1], bad[2] = "2", "1"
        with pytest.raises(AnnotationError, match="presence"):
            parse_annotations([" ".join(bad)])

    def test_wrong_field_count_names_line(self):
        with pytest.raises(AnnotationError, match="line 1.*fields"):
            parse_annotations(["1 2 3"])

    def test_non_numeric_field_names_line(self):
        bad = line(0, set(), 0.5, 0).replace("0.5", "abc")
        with pytest.raises(AnnotationError, match="line 1"):
            parse_annotations([bad])


class TestInterpolateVa:
    def test_midpoint_doubling(self):
        out = interpolate_va([0.0, 1.0], src_fps=15, dst_fps=30)
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_same_fps_identity(self):
        vals = [0.3, -0.2, 0.7]
        np.testing.assert_array_equal(interpolate_va(vals, 30, 30), vals)

    def test_linear_ramp_reproduced_exactly(self):
        for src, dst in ((25, 30), (24, 30), (30, 25), (12.5, 30)):
            n = 41
            t = np.arange(n) / src
            ramp = 0.3 * t - 0.1
            out = interpolate_va(ramp, src, dst)
            expect = 0.3 * (np.arange(len(out)) / dst) - 0.1
            np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_endpoints_preserved(self):
        out = interpolate_va([0.2, 0.9, -0.4], 15, 30)
        assert out[0] == pytest.approx(0.2)
        assert out[-1] == pytest.approx(-0.4)

    def test_single_value_degenerates(self):
        np.testing.assert_array_equal(interpolate_va([0.7], 25, 30), [0.7])

    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_output_stays_inside_input_range(self, vals):
        out = interpolate_va(vals, 25, 30)
        assert out.min() >= min(vals) - 1e-12
        assert out.max() <= max(vals) + 1e-12


class TestAlignLengths:
    def test_crop_keeps_first_entries(self):
        va = np.arange(102, dtype=float)
        out = align_lengths(va, 100)
        np.testing.assert_array_equal(out, np.arange(100, dtype=float))

    def test_extend_repeats_last_value(self):
        va = np.concatenate([np.zeros(98), [0.7]])
        out = align_lengths(va, 100)
        assert len(out) == 100
        assert out[-1] == 0.7
        assert out[-2] == 0.7

    def test_exact_length_untouched(self):
        va = np.arange(10, dtype=float)
        np.testing.assert_array_equal(align_lengths(va, 10), va)

    @pytest.mark.parametrize("delta", [-2, -1, 1, 2])
    def test_small_discrepancies_ok(self, delta):
        out = align_lengths(np.linspace(0, 1, 100 + delta), 100)
        assert len(out) == 100

    def test_large_discrepancy_rejected(self):
        with pytest.raises(ValueError, match="fps"):
            align_lengths(np.zeros(95), 100)


class TestSelectFace:
    def c(self, x, y, spread=1.0):
        return LandmarkCandidate([[x - spread, y - spread],
                                  [x + spread, y - spread],
                                  [x - spread, y + spread],
                                  [x + spread, y + spread]])

    def test_single_candidate(self):
        only = self.c(3, 4)
        assert select_face([only], prev_center=(0, 0)) is only

    def test_nearest_to_previous(self):
        near, far = self.c(0, 0), self.c(10, 10)
        assert select_face([far, near], prev_center=(1, 1)) is near

    def test_tie_breaks_to_lowest_index(self):
        a, b = self.c(1, 0), self.c(-1, 0)
        assert select_face([a, b], prev_center=(0, 0)) is a

    def test_no_previous_takes_first(self):
        a, b = self.c(9, 9), self.c(0, 0)
        assert select_face([a, b], prev_center=None) is a

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no face"):
            select_face([], None)

    def test_permutation_stable_for_distinct_distances(self):
        rng = np.random.default_rng(0)
        cands = [self.c(x, y) for x, y in rng.uniform(0, 50, size=(6, 2))]
        prev = (25.0, 25.0)
        chosen = select_face(cands, prev).center
        for _ in range(10):
            perm = [cands[i] for i in rng.permutation(6)]
            np.testing.assert_array_equal(select_face(perm, prev).center, chosen)

    def test_center_is_mean_of_points(self):
        cand = LandmarkCandidate([[0, 0], [2, 0], [0, 2], [2, 2]])
        np.testing.assert_array_equal(cand.center, [1.0, 1.0])


class TestSplitDataset:
    def _videos(self, n=10, frames=100, distinct=True, seed=0):
        rng = np.random.default_rng(seed)
        out = []
        for i in range(n):
            out.append(VideoMeta(
                video_id=f"v{i:02d}",
                identity_id=f"p{i:02d}" if distinct else f"p{i % 5:02d}",
                frame_count=frames,
                au_counts=rng.integers(10, 200, size=8)))
        return out

    def test_equal_videos_give_eight_two(self):
        report = split_dataset(self._videos(10), seed=1)
        assert len(report.train_ids) == 8
        assert len(report.test_ids) == 2
        assert report.train_fraction == pytest.approx(0.8)

    def test_identity_closure(self):
        videos = self._videos(12, distinct=False)
        report = split_dataset(videos, seed=3)
        by_identity = {}
        for v in videos:
            side = "train" if v.video_id in report.train_ids else "test"
            by_identity.setdefault(v.identity_id, set()).add(side)
        assert all(len(sides) == 1 for sides in by_identity.values())

    def test_partition_covers_everything(self):
        videos = self._videos(15)
        report = split_dataset(videos, seed=5)
        assert sorted(report.train_ids + report.test_ids) == \
            sorted(v.video_id for v in videos)
        assert not set(report.train_ids) & set(report.test_ids)

    def test_deterministic_given_seed(self):
        videos = self._videos(20, seed=2)
        a = split_dataset(videos, seed=11)
        b = split_dataset(videos, seed=11)
        assert a.train_ids == b.train_ids
        assert a.max_gap == b.max_gap

    def test_fraction_window_respected_over_seeds(self):
        rng = np.random.default_rng(9)
        videos = [VideoMeta(f"v{i}", f"p{i}", int(rng.integers(50, 400)),
                            au_counts=rng.integers(0, 100, size=8))
                  for i in range(25)]
        for seed in range(100):
            report = split_dataset(videos, seed=seed, trials=200)
            assert 0.78 <= report.train_fraction <= 0.86

    def test_dominant_identity_rejected(self):
        videos = [VideoMeta("big", "p0", 9000, au_counts=np.ones(8)),
                  VideoMeta("small", "p1", 500, au_counts=np.ones(8))]
        with pytest.raises(ValueError, match="identity"):
            split_dataset(videos)

    def test_gap_report_matches_hand_computation(self):
        videos = self._videos(10, seed=4)
        report = split_dataset(videos, seed=7)
        train = [v for v in videos if v.video_id in report.train_ids]
        test = [v for v in videos if v.video_id in report.test_ids]
        tr = np.sum([v.au_counts for v in train], axis=0)
        te = np.sum([v.au_counts for v in test], axis=0)
        tr_pct = tr / tr.sum() * 100
        te_pct = te / te.sum() * 100
        np.testing.assert_allclose(report.au_gaps, np.abs(tr_pct - te_pct),
                                   atol=1e-12)
        assert report.max_gap == pytest.approx(np.abs(tr_pct - te_pct).max())


class TestComputeStats:
    def _records(self, n, seed=0):
        rng = np.random.default_rng(seed)
        recs = []
        for i in range(n):
            presence = rng.integers(0, 2, size=8).astype(np.uint8)
            recs.append(AnnotationRecord(i, presence, presence.copy(),
                                         float(rng.uniform(-1, 1)),
                                         float(rng.uniform(-1, 1))))
        return recs

    def test_paper_percentage_arithmetic(self):
        # 41,741 of 222,241 labels is 18.78%
        assert 41_741 / 222_241 * 100 == pytest.approx(18.78, abs=0.01)

    def test_counts_sum_and_percentages(self):
        stats = compute_stats({"train": self._records(200),
                               "test": self._records(50, seed=1)})
        for split in ("train", "test", "total"):
            pct = stats.au_pct[split]
            assert pct.sum() == pytest.approx(100.0, abs=0.05)
        total = stats.au_counts["train"] + stats.au_counts["test"]
        np.testing.assert_array_equal(stats.au_counts["total"], total)

    def test_histogram_mass_equals_record_count(self):
        recs = self._records(300)
        stats = compute_stats({"train": recs})
        v_hist, a_hist = stats.va_histograms["train"]
        assert v_hist.sum() == 300
        assert a_hist.sum() == 300
        assert len(v_hist) == 40

    def test_empty_split_is_all_zero(self):
        stats = compute_stats({"train": self._records(10), "test": []})
        assert stats.au_counts["test"].sum() == 0
        np.testing.assert_array_equal(stats.au_pct["test"], np.zeros(8))

    def test_scatter_points_per_au(self):
        recs = self._records(50)
        stats = compute_stats({"train": recs})
        for j, au in enumerate(AU_IDS):
            expect = sum(int(r.au_presence[j]) for r in recs)
            assert len(stats.scatter[au]) == expect

    def test_csv_shapes(self):
        stats = compute_stats({"train": self._records(20)})
        au_lines = stats.au_csv().strip().splitlines()
        assert au_lines[0] == "split,au,count,percentage"
        assert len(au_lines) == 1 + 2 * 8  # train + total
        hist_lines = stats.histogram_csv().strip().splitlines()
        assert len(hist_lines) == 1 + 2 * 2 * 40


class TestPackedContainer:
    def _payload(self, n=5, h=28, w=28, c=3, seed=0):
        rng = np.random.default_rng(seed)
        images = rng.integers(0, 256, size=(n, h, w, c), dtype=np.uint8)
        recs = []
        for i in range(n):
            presence = rng.integers(0, 2, size=8).astype(np.uint8)
            recs.append(AnnotationRecord(i, presence, presence.copy(),
                                         float(rng.uniform(-1, 1)),
                                         float(rng.uniform(-1, 1))))
        return images, recs

    def test_roundtrip_bit_exact(self, tmp_path):
        images, recs = self._payload()
        path = tmp_path / "d.afds"
        pack_dataset(images, recs, path)
        images2, recs2 = read_dataset(path)
        np.testing.assert_array_equal(images, images2)
        for a, b in zip(recs, recs2):
            np.testing.assert_array_equal(a.au_presence, b.au_presence)
            np.testing.assert_array_equal(a.au_intensity, b.au_intensity)
            assert b.valence == pytest.approx(a.valence, abs=1e-7)
        # byte-stable after the first f32 quantisation
        pack_dataset(images2, recs2, tmp_path / "e.afds")
        assert (tmp_path / "d.afds").read_bytes() == \
            (tmp_path / "e.afds").read_bytes()

    def test_zero_image_dataset_is_24_byte_header(self, tmp_path):
        path = tmp_path / "empty.afds"
        pack_dataset(np.zeros((0, 28, 28, 3), dtype=np.uint8), [], path)
        assert path.stat().st_size == 24
        images, recs = read_dataset(path)
        assert len(images) == 0 and recs == []

    def test_declared_payload_size(self, tmp_path):
        images, recs = self._payload(n=10)
        path = tmp_path / "d.afds"
        pack_dataset(images, recs, path)
        record_bytes = 8 + 8 + 4 + 4
        assert path.stat().st_size == 24 + 10 * (28 * 28 * 3 + record_bytes)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.afds"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ContainerError, match="magic"):
            read_dataset(path)

    def test_truncation_reports_offset(self, tmp_path):
        images, recs = self._payload()
        path = tmp_path / "d.afds"
        pack_dataset(images, recs, path)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(ContainerError, match="offset"):
            read_dataset(path)

    def test_count_mismatch_rejected(self, tmp_path):
        images, recs = self._payload()
        with pytest.raises(ContainerError, match="records"):
            pack_dataset(images, recs[:-1], tmp_path / "x.afds")

    def test_to_training_arrays_range(self, tmp_path):
        images, recs = self._payload()
        floats, labels = to_training_arrays(images, recs)
        assert floats.min() >= -1.0 and floats.max() <= 1.0
        assert labels.au.shape == (5, 8)
        assert labels.real_flag.sum() == 0
