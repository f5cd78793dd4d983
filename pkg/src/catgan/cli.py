"""Command-line interface: dataset building, statistics, splitting,
training, checkpoint sweeping and sample-grid generation.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  The environment
variable CATGAN_PRECISION ({f32, f64}) selects the working precision.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as D
from . import tensor
from .corpora import load_digit_corpus
from .estimators import HEAD_NAMES, head_from_name
from .models import load_checkpoint
from .tensor import no_grad
from .training import (ArrayDataset, TrainConfig, TrainingDiverged,
                       best_table_csv, evaluate_checkpoints,
                       format_best_table, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class CliError(RuntimeError):
    pass


def build_parser() -> _Parser:
    parser = _Parser(prog="catgan",
                     description="categorical GAN toolkit: dataset "
                                 "engineering, training and evaluation")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a GAN variant on a packed dataset")
    p.add_argument("--head", choices=HEAD_NAMES + ("vanilla",), required=True)
    p.add_argument("--lr", type=float, default=1e-4,
                   help="generator learning rate; the discriminator uses half")
    p.add_argument("--update-rate", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.9,
                   help="fake-label smoothing mass on the fake node")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--iterations", type=int, required=True)
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", required=True,
                   help="packed dataset file, or 'demo-digits[:N]' for the "
                        "bundled digit corpus")
    p.add_argument("--labels", default=None,
                   help=".npy class labels for --head softmax")
    p.add_argument("--out", required=True)
    p.add_argument("--ponderated", action="store_true",
                   help="0.27/0.40/0.33 loss weighting (joint head only)")
    p.add_argument("--k", type=int, default=10,
                   help="class count for the softmax head")
    p.add_argument("--image-size", type=int, default=28, choices=(28, 32))
    p.add_argument("--test-fraction", type=float, default=0.2,
                   help="held-out fraction when --data has no test split")

    p = sub.add_parser("evaluate",
                       help="best score per metric over saved checkpoints")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--out", default=None,
                   help="directory for best_scores.csv (default: stdout only)")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate", help="write a PNG grid of samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dataset-build",
                       help="pack frames and annotations into a container")
    p.add_argument("--frames", required=True,
                   help="directory of <video>/<frame>.png images")
    p.add_argument("--annotations", required=True,
                   help="directory of <video>.txt annotation files")
    p.add_argument("--va", default=None,
                   help="directory of per-video 'valence arousal' series to "
                        "interpolate and merge (annotations are then AU-only)")
    p.add_argument("--manifest", default=None,
                   help="CSV video_id,identity_id,fps (required with --va)")
    p.add_argument("--landmarks", default=None,
                   help="directory of <video>.txt face-candidate files")
    p.add_argument("--image-size", type=int, default=28)
    p.add_argument("--keep-empty", action="store_true",
                   help="keep frames with no action unit present")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("dataset-stats",
                       help="AU counts/percentages and VA histograms")
    p.add_argument("--annotations", required=True)
    p.add_argument("--split", default=None,
                   help="split.json from the split verb for per-side stats")
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split",
                       help="identity-closed train/test split of videos")
    p.add_argument("--annotations", required=True)
    p.add_argument("--manifest", required=True,
                   help="CSV video_id,identity_id,fps")
    p.add_argument("--target-fraction", type=float, default=0.8)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="where to write split.json")
    return parser


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def _read_manifest(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["video_id"]] = {"identity_id": row["identity_id"],
                                    "fps": float(row.get("fps", 30.0) or 30.0)}
    if not out:
        raise CliError(f"empty manifest {path}")
    return out


def _load_packed(path, labels_path, test_fraction, seed, vanilla=False):
    """ArrayDataset from a packed container or the demo digit corpus."""
    if str(path).startswith("demo-digits"):
        n = None
        if ":" in str(path):
            n = int(str(path).split(":", 1)[1])
        corpus = load_digit_corpus(n_train=n, seed=seed)
        print(f"loaded digit corpus: {corpus.source} "
              f"({len(corpus.train_images)} train / "
              f"{len(corpus.test_images)} test)")
        from .validation import check_flat_images, check_image_batch
        if vanilla:
            return ArrayDataset(
                train_images=check_flat_images(corpus.train_images),
                test_images=check_flat_images(corpus.test_images))
        from .models import LabelBatch
        mk = lambda im, lab: (check_image_batch(im),
                              LabelBatch(real_flag=np.zeros(len(im), dtype=int),
                                         category=lab.astype(np.int64)))
        xtr, ltr = mk(corpus.train_images, corpus.train_labels)
        xte, lte = mk(corpus.test_images, corpus.test_labels)
        return ArrayDataset(train_images=xtr, test_images=xte,
                            train_labels=ltr, test_labels=lte)

    if not os.path.exists(path):
        raise CliError(f"no such dataset file: {path}")
    images, records = D.read_dataset(path)
    categories = None
    if labels_path:
        categories = np.load(labels_path)
        if len(categories) != len(images):
            raise CliError(
                f"{len(categories)} labels for {len(images)} images")
    if vanilla:
        flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
        order = np.random.default_rng(seed).permutation(len(flat))
        cut = max(2, int(len(flat) * test_fraction))
        return ArrayDataset(train_images=flat[order[cut:]],
                            test_images=flat[order[:cut]])
    floats, labels = D.to_training_arrays(images, records, categories)
    from .training import take_labels
    order = np.random.default_rng(seed).permutation(len(floats))
    cut = max(2, int(len(floats) * test_fraction))
    te, tr = order[:cut], order[cut:]
    return ArrayDataset(train_images=floats[tr], test_images=floats[te],
                        train_labels=take_labels(labels, tr),
                        test_labels=take_labels(labels, te))


def _image_grid(images: np.ndarray, columns: int = 4) -> np.ndarray:
    """Tile [N, H, W, C] images row-major into one grid image."""
    n, h, w, c = images.shape
    rows = -(-n // columns)
    grid = np.zeros((rows * h, columns * w, c), dtype=images.dtype)
    for i, img in enumerate(images):
        r, col = divmod(i, columns)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = img
    return grid


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    vanilla = args.head == "vanilla"
    dataset = _load_packed(args.data, args.labels, args.test_fraction,
                           args.seed, vanilla=vanilla)
    head = None if vanilla else head_from_name(args.head, k=args.k,
                                               ponderated=args.ponderated)
    config = TrainConfig(head=head, learning_rate=args.lr,
                         update_rate=args.update_rate, alpha=args.alpha,
                         batch_size=args.batch_size,
                         iterations=args.iterations,
                         checkpoint_every=args.checkpoint_every,
                         seed=args.seed, image_size=args.image_size,
                         eval_every=args.eval_every)
    print(f"# train config: {config.echo()}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        records = train(config, dataset, out)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"saved {len(records)} checkpoints under {out / 'checkpoints'}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    dataset = _load_packed(args.data, args.labels, args.test_fraction,
                           args.seed)
    try:
        rows = evaluate_checkpoints(args.checkpoints, dataset.test_images,
                                    dataset.test_labels)
    except FileNotFoundError:
        print("error: no checkpoints", file=sys.stderr)
        return EXIT_RUNTIME
    print(format_best_table(rows))
    out = Path(args.out) if args.out else Path(args.checkpoints)
    out.mkdir(parents=True, exist_ok=True)
    (out / "best_scores.csv").write_text(best_table_csv(rows))
    print(f"wrote {out / 'best_scores.csv'}")
    return EXIT_OK


def _cmd_generate(args) -> int:
    from PIL import Image

    model, iteration, _ = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    z = model.sample_noise(rng, args.count)
    with no_grad():
        imgs = model.generate(z, training=False).data
    if model.kind == "vanilla":
        side = model.image_size
        imgs = imgs.reshape(-1, side, side, 1)
        pixels = np.clip(imgs * 255.0, 0, 255).round().astype(np.uint8)
        pixels = np.repeat(pixels, 3, axis=-1)
    else:
        pixels = np.clip((imgs + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    grid = _image_grid(pixels)
    out = Path(args.out) / "samples"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"samples-{iteration:08d}-seed{args.seed}.png"
    Image.fromarray(grid).save(path, format="PNG")
    print(f"wrote {path}")
    return EXIT_OK


def _annotation_videos(annotations_dir) -> list[Path]:
    files = sorted(Path(annotations_dir).glob("*.txt"))
    if not files:
        raise CliError(f"no annotation files in {annotations_dir}")
    return files


def _load_candidates(path) -> dict:
    """Landmark file: frame then one or more x1 y1 ... x4 y4 candidates."""
    out = {}
    for line in Path(path).read_text().splitlines():
        cells = line.split()
        if not cells or cells[0].startswith("#"):
            continue
        frame = int(cells[0])
        vals = [float(v) for v in cells[1:]]
        if not vals or len(vals) % 8:
            raise CliError(f"{path}: frame {frame}: candidates need "
                           f"8 coordinates each")
        out[frame] = [D.LandmarkCandidate(np.array(vals[i:i + 8]).reshape(4, 2))
                      for i in range(0, len(vals), 8)]
    return out


def _cmd_dataset_build(args) -> int:
    from PIL import Image

    manifest = _read_manifest(args.manifest) if args.manifest else {}
    if args.va and not args.manifest:
        raise CliError("--va needs --manifest for the source frame rates")

    all_images, all_records = [], []
    size = args.image_size
    for ann_path in _annotation_videos(args.annotations):
        vid = ann_path.stem
        with open(ann_path) as fh:
            if args.va:
                records = D.parse_au_annotations(fh)
            else:
                records = D.parse_annotations(fh)
        if args.va:
            va_path = Path(args.va) / f"{vid}.txt"
            if not va_path.exists():
                raise CliError(f"missing VA series {va_path}")
            series = np.loadtxt(va_path, ndmin=2)
            fps = manifest.get(vid, {}).get("fps", 30.0)
            val = D.align_lengths(D.interpolate_va(series[:, 0], fps),
                                  len(records))
            aro = D.align_lengths(D.interpolate_va(series[:, 1], fps),
                                  len(records))
            for rec, v, a in zip(records, val, aro):
                rec.valence = float(np.clip(v, -1.0, 1.0))
                rec.arousal = float(np.clip(a, -1.0, 1.0))

        candidates = {}
        if args.landmarks:
            lm_path = Path(args.landmarks) / f"{vid}.txt"
            if lm_path.exists():
                candidates = _load_candidates(lm_path)

        frame_dir = Path(args.frames) / vid
        prev_center = None
        for rec in records:
            if not args.keep_empty and rec.au_presence.sum() == 0:
                continue
            matches = list(frame_dir.glob(f"{rec.frame}.*")) + \
                list(frame_dir.glob(f"{rec.frame:06d}.*"))
            if not matches:
                continue
            img = Image.open(matches[0]).convert("RGB")
            if rec.frame in candidates:
                chosen = D.select_face(candidates[rec.frame], prev_center)
                prev_center = chosen.center
                x0, y0 = chosen.points.min(axis=0)
                x1, y1 = chosen.points.max(axis=0)
                img = img.crop((x0, y0, x1, y1))
            img = img.resize((size, size), Image.BILINEAR)
            all_images.append(np.asarray(img, dtype=np.uint8))
            all_records.append(rec)

    if not all_images:
        raise CliError("no frames matched the annotations")
    D.pack_dataset(np.stack(all_images), all_records, args.out)
    print(f"packed {len(all_images)} samples into {args.out}")
    return EXIT_OK


def _split_records(args):
    per_video = {}
    for ann_path in _annotation_videos(args.annotations):
        with open(ann_path) as fh:
            per_video[ann_path.stem] = D.parse_annotations(fh)
    return per_video


def _cmd_dataset_stats(args) -> int:
    per_video = _split_records(args)
    if args.split:
        sides = json.loads(Path(args.split).read_text())
        grouped = {"train": [], "test": []}
        for vid, recs in per_video.items():
            side = "train" if vid in sides["train_ids"] else "test"
            grouped[side].extend(recs)
    else:
        grouped = {"all": [r for recs in per_video.values() for r in recs]}
    stats = D.compute_stats(grouped, bins=args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "au_stats.csv").write_text(stats.au_csv())
    (out / "va_histogram.csv").write_text(stats.histogram_csv())
    print(f"wrote {out / 'au_stats.csv'} and {out / 'va_histogram.csv'}")
    for split, counts in stats.au_counts.items():
        print(f"{split}: {counts.sum()} AU labels over "
              f"{stats.record_counts[split]} frames")
    return EXIT_OK


def _cmd_split(args) -> int:
    manifest = _read_manifest(args.manifest)
    per_video = _split_records(args)
    videos = []
    for vid, recs in per_video.items():
        if vid not in manifest:
            raise CliError(f"video {vid} missing from manifest")
        au_counts = np.sum([r.au_presence for r in recs], axis=0) \
            if recs else np.zeros(8, dtype=np.int64)
        videos.append(D.VideoMeta(vid, manifest[vid]["identity_id"],
                                  len(recs), manifest[vid]["fps"], au_counts))
    report = D.split_dataset(videos, target_fraction=args.target_fraction,
                             seed=args.seed, trials=args.trials)
    payload = {"train_ids": report.train_ids, "test_ids": report.test_ids,
               "train_fraction": report.train_fraction,
               "max_gap_pct": report.max_gap,
               "au_gaps_pct": report.au_gaps.tolist(), "seed": args.seed}
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"train fraction {report.train_fraction:.1%}, "
          f"max AU gap {report.max_gap:.2f}%")
    for line in report.gap_lines():
        print(" ", line)
    print(f"wrote {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    precision = os.environ.get("CATGAN_PRECISION", "f64").lower()
    if precision in ("f32", "float32"):
        tensor.set_default_dtype(np.float32)
    elif precision in ("f64", "float64"):
        tensor.set_default_dtype(np.float64)
    else:
        print(f"error: CATGAN_PRECISION must be f32 or f64, "
              f"got {precision!r}", file=sys.stderr)
        return EXIT_USAGE

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    # every run opens with its resolved options so it can be replayed
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "verb"}
    print(f"# config: verb={args.verb} precision={precision} "
          f"{json.dumps(resolved, default=str, sort_keys=True)}")

    handlers = {"train": _cmd_train, "evaluate": _cmd_evaluate,
                "generate": _cmd_generate, "dataset-build": _cmd_dataset_build,
                "dataset-stats": _cmd_dataset_stats, "split": _cmd_split}
    try:
        return handlers[args.verb](args)
    except (CliError, D.AnnotationError, D.ContainerError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
