"""Training loop, alternation schedule, metric logging and checkpoint sweep.

The categorical protocol updates exactly one network per iteration: the
discriminator whenever the iteration index is a multiple of update_rate + 1,
the generator otherwise.  The vanilla pair predates that protocol and steps
both networks every iteration from a single shared forward pass.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .layers import clip_gradients, global_grad_norm
from .models import (GanModel, HeadVariant, LabelBatch,
                     assemble_discriminator_loss, assemble_generator_loss,
                     build_categorical, build_vanilla, head_outputs,
                     load_checkpoint, save_checkpoint,
                     vanilla_discriminator_loss, vanilla_generator_loss,
                     CheckpointError)
from .optim import Adam, gan_adam
from .tensor import Tensor, gradients, no_grad

DISCRIMINATOR = "discriminator"
GENERATOR = "generator"


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the failing iteration."""

    def __init__(self, iteration: int, last_checkpoint: str | None):
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint
        where = last_checkpoint or "none saved yet"
        super().__init__(
            f"non-finite loss at iteration {iteration} "
            f"(last good checkpoint: {where})"
        )


def update_target(iteration: int, update_rate: int) -> str:
    """Which network trains at this iteration.

    The discriminator is updated at every multiple of update_rate + 1
    (iteration 0 included); the generator at every other iteration.
    """
    if update_rate < 1:
        raise ValueError(f"update_rate must be >= 1, got {update_rate}")
    if iteration % (update_rate + 1) == 0:
        return DISCRIMINATOR
    return GENERATOR


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    learning_rate applies to the generator; the discriminator always uses
    exactly half of it.
    """

    head: HeadVariant | None = None       # None selects the vanilla pair
    learning_rate: float = 1e-4
    update_rate: int = 5
    alpha: float = 0.9
    batch_size: int = 64
    iterations: int = 20_000
    checkpoint_every: int = 1000
    seed: int = 0
    clip_norm: float = 20.0
    image_size: int = 28
    eval_every: int = 1
    bias_correction: bool = True
    non_saturating: bool = False
    model_kwargs: dict = field(default_factory=dict)

    @property
    def disc_learning_rate(self) -> float:
        return self.learning_rate / 2.0

    def echo(self) -> str:
        payload = {k: v for k, v in self.__dict__.items() if k != "head"}
        if self.head is not None:
            payload["head"] = {"kind": self.head.kind, "k": self.head.k,
                               "va_loss": self.head.va_loss,
                               "weights": self.head.weights}
        else:
            payload["head"] = "vanilla"
        return json.dumps(payload, sort_keys=True, default=repr)


@dataclass
class ArrayDataset:
    """In-memory split corpus fed to the trainer.

    Categorical images are [N, H, W, 3] floats in [-1, 1]; vanilla images
    are [N, 784] floats in [0, 1].  Labels may be None for the vanilla pair.
    """

    train_images: np.ndarray
    test_images: np.ndarray
    train_labels: LabelBatch | None = None
    test_labels: LabelBatch | None = None

    def __post_init__(self):
        if len(self.train_images) == 0:
            raise ValueError("empty training set")
        if len(self.test_images) == 0:
            raise ValueError("empty test set")


def take_labels(labels: LabelBatch, idx) -> LabelBatch:
    pick = lambda a: None if a is None else a[idx]
    return LabelBatch(real_flag=labels.real_flag[idx], au=pick(labels.au),
                      valence=pick(labels.valence), arousal=pick(labels.arousal),
                      category=pick(labels.category))


def real_label_batch(n: int, au=None, valence=None, arousal=None,
                     category=None) -> LabelBatch:
    return LabelBatch(real_flag=np.zeros(n, dtype=np.int64), au=au,
                      valence=valence, arousal=arousal, category=category)


@dataclass
class CheckpointRecord:
    path: str
    iteration: int
    metrics_snapshot: dict


class _Cycler:
    """Deterministic cyclic batches over a fixed permutation of one split."""

    def __init__(self, count: int, rng: np.random.Generator):
        self.order = rng.permutation(count)
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        idx = np.empty(n, dtype=np.int64)
        for i in range(n):
            idx[i] = self.order[self.pos]
            self.pos = (self.pos + 1) % len(self.order)
        return idx


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_model(model: GanModel, images: np.ndarray,
                   labels: LabelBatch | None, iteration: int,
                   batch_size: int = 256) -> M.MetricsReport:
    """Score the discriminator on real images in inference mode."""
    outs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.discriminate(images[start:start + batch_size],
                                        training=False)
            outs.append(model.head_probabilities(logits))
    probs = np.concatenate(outs, axis=0)
    report = M.MetricsReport(iteration=iteration)

    if model.kind == "vanilla":
        # the single node is the probability of being real
        report.pct_real_as_real = M.pct_real_as_real(
            1.0 - probs[:, 0], np.zeros(len(probs)))
        return report

    head = model.head
    fake_prob = probs[:, -1]
    report.pct_real_as_real = M.pct_real_as_real(
        fake_prob, np.zeros(len(probs)))
    if head.kind == "softmax":
        if labels is not None and labels.category is not None:
            pred = probs[:, :head.k].argmax(axis=1)
            report.class_accuracy = float(np.mean(pred == labels.category))
        return report
    if head.kind in ("au", "joint"):
        offset = 0 if head.kind == "au" else 2
        au_probs = probs[:, offset:offset + M.NUM_AUS]
        scores, mean_f1, mean_acc, mom = M.classification_metrics(
            au_probs >= 0.5, labels.au)
        report.per_au = scores
        report.mean_f1 = mean_f1
        report.mean_accuracy = mean_acc
        report.mean_of_means = mom
    if head.kind in ("va", "joint"):
        report.ccc_valence = M.ccc(probs[:, 0], labels.valence)
        report.ccc_arousal = M.ccc(probs[:, 1], labels.arousal)
        report.mse_valence = M.mse(probs[:, 0], labels.valence)
        report.mse_arousal = M.mse(probs[:, 1], labels.arousal)
    return report


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def _build_model(config: TrainConfig, rng: np.random.Generator) -> GanModel:
    if config.head is None:
        return build_vanilla(rng, **config.model_kwargs)
    return build_categorical(config.head, config.image_size, rng,
                             alpha=config.alpha, **config.model_kwargs)


def _param_tensors(params: dict, requires_grad: bool) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _train_iteration(config, dataset, model, it, target, vanilla,
                     opt_g, opt_d, noise_rng, dropout_rng, batch_rng):
    """One forward/backward/update; returns (d_loss, g_loss, grad_norm)."""
    g_tensors = _param_tensors(model.gen_params,
                               vanilla or target == GENERATOR)
    d_tensors = _param_tensors(model.disc_params,
                               vanilla or target == DISCRIMINATOR)

    n_train = len(dataset.train_images)
    if n_train >= config.batch_size:
        idx = batch_rng.choice(n_train, size=config.batch_size, replace=False)
    else:
        idx = batch_rng.integers(0, n_train, size=config.batch_size)
    real = dataset.train_images[idx]
    z = model.sample_noise(noise_rng, config.batch_size)

    fake = model.generate(z, training=True, rng=dropout_rng, params=g_tensors)
    d_fake = model.discriminate(fake, training=True, rng=dropout_rng,
                                params=d_tensors)
    d_real = model.discriminate(real, training=True, rng=dropout_rng,
                                params=d_tensors)

    if vanilla:
        d_loss, _ = vanilla_discriminator_loss(d_real, d_fake)
        g_loss = vanilla_generator_loss(d_fake)
    else:
        labels = take_labels(dataset.train_labels, idx)
        d_loss, _ = assemble_discriminator_loss(
            model.head, d_real, d_fake, labels, config.alpha)
        g_loss = assemble_generator_loss(
            model.head, d_fake, fake, real, it,
            non_saturating=config.non_saturating)

    d_val, g_val = d_loss.item(), g_loss.item()
    if not (math.isfinite(d_val) and math.isfinite(g_val)):
        return d_val, g_val, 0.0

    grad_norm = 0.0
    if vanilla:
        # single shared forward; both nets step from it (no alternation)
        d_loss.backward()
        d_grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
                   for k, t in d_tensors.items()}
        for t in list(d_tensors.values()) + list(g_tensors.values()):
            t.grad = None
        g_loss.backward()
        g_grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
                   for k, t in g_tensors.items()}
        model.disc_params = opt_d.step(model.disc_params, d_grads)
        model.gen_params = opt_g.step(model.gen_params, g_grads)
    elif target == DISCRIMINATOR:
        grads = clip_gradients(gradients(d_loss, d_tensors), config.clip_norm)
        grad_norm = global_grad_norm(grads)
        model.disc_params = opt_d.step(model.disc_params, grads)
    else:
        grads = clip_gradients(gradients(g_loss, g_tensors), config.clip_norm)
        grad_norm = global_grad_norm(grads)
        model.gen_params = opt_g.step(model.gen_params, grads)
    return d_val, g_val, grad_norm


def train(config: TrainConfig, dataset: ArrayDataset, out_dir) -> list[CheckpointRecord]:
    """Run the full loop, writing metrics.tsv, losses.tsv and checkpoints/.

    Returns the checkpoint records in saving order.  Raises
    TrainingDiverged as soon as either loss turns non-finite.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(config.seed).spawn(5)
    init_rng, noise_rng, dropout_rng, batch_rng, eval_rng = \
        (np.random.default_rng(s) for s in seeds)

    model = _build_model(config, init_rng)
    vanilla = model.kind == "vanilla"
    if vanilla:
        opt_g = Adam(config.learning_rate,
                     bias_correction=config.bias_correction)
        opt_d = Adam(config.disc_learning_rate,
                     bias_correction=config.bias_correction)
    else:
        opt_g = gan_adam(config.learning_rate, config.bias_correction)
        opt_d = gan_adam(config.disc_learning_rate, config.bias_correction)

    train_cycle = _Cycler(len(dataset.train_images), eval_rng)
    test_cycle = _Cycler(len(dataset.test_images), eval_rng)

    metrics_log = open(out_dir / "metrics.tsv", "w")
    metrics_json = open(out_dir / "metrics.jsonl", "w")
    losses_log = open(out_dir / "losses.tsv", "w")
    echo = f"# config: {config.echo()}"
    print(echo, file=metrics_log)
    print("\t".join(["iteration", "side"] + M.MetricsReport.column_names()),
          file=metrics_log)
    print(json.dumps({"config": json.loads(config.echo())}), file=metrics_json)
    print(echo, file=losses_log)
    print("iteration\td_loss\tg_loss\tupdated\tgrad_norm", file=losses_log)

    records: list[CheckpointRecord] = []
    last_ckpt_path: str | None = None
    last_reports = {"train": None, "test": None}

    try:
        for it in range(config.iterations):
            target = None if vanilla else update_target(it, config.update_rate)
            try:
                d_val, g_val, grad_norm = _train_iteration(
                    config, dataset, model, it, target, vanilla,
                    opt_g, opt_d, noise_rng, dropout_rng, batch_rng)
            except FloatingPointError:
                raise TrainingDiverged(it, last_ckpt_path) from None
            if not (math.isfinite(d_val) and math.isfinite(g_val)):
                raise TrainingDiverged(it, last_ckpt_path)

            print(f"{it}\t{d_val!r}\t{g_val!r}\t{target or 'both'}\t{grad_norm!r}",
                  file=losses_log)

            if config.eval_every and it % config.eval_every == 0:
                for side, images, labels_all, cyc in (
                        ("train", dataset.train_images, dataset.train_labels,
                         train_cycle),
                        ("test", dataset.test_images, dataset.test_labels,
                         test_cycle)):
                    bidx = cyc.take(min(config.batch_size, len(images)))
                    blabels = None if labels_all is None \
                        else take_labels(labels_all, bidx)
                    report = evaluate_model(model, images[bidx], blabels, it)
                    last_reports[side] = report
                    print(report.to_tsv(side), file=metrics_log)
                    print(report.to_json(side), file=metrics_json)

            done = it + 1
            if done % config.checkpoint_every == 0 or done == config.iterations:
                path = str(ckpt_dir / f"checkpoint-{done:08d}.cgan")
                rng_states = {
                    "noise": noise_rng.bit_generator.state,
                    "dropout": dropout_rng.bit_generator.state,
                    "batch": batch_rng.bit_generator.state,
                }
                save_checkpoint(path, model, done, rng_states)
                records.append(CheckpointRecord(
                    path=path, iteration=done,
                    metrics_snapshot=dict(last_reports)))
                last_ckpt_path = path
    finally:
        metrics_log.close()
        metrics_json.close()
        losses_log.close()
    return records


# ---------------------------------------------------------------------------
# checkpoint sweep
# ---------------------------------------------------------------------------

@dataclass
class BestScore:
    metric: str
    value: float
    iteration: int


def evaluate_checkpoints(checkpoint_dir, test_images, test_labels,
                         batch_size: int = 256,
                         warn=print) -> list[BestScore]:
    """Best score per metric across every readable checkpoint.

    All metrics are computed over the full test set.  Ties go to the
    earliest iteration; unreadable checkpoints are skipped with a warning.
    Alongside the per-iteration mean of F1 and accuracy, the sweep reports
    the mean of the *best* F1 and the *best* accuracy, which may come from
    different iterations (labelled mean_of_best_f1_and_best_accuracy).
    """
    paths = sorted(Path(checkpoint_dir).glob("*.cgan"))
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {checkpoint_dir}")

    best: dict[str, BestScore] = {}
    usable = 0
    for path in paths:
        try:
            model, iteration, _ = load_checkpoint(path)
        except (CheckpointError, OSError) as exc:
            warn(f"warning: skipping unreadable checkpoint {path}: {exc}")
            continue
        usable += 1
        report = evaluate_model(model, test_images, test_labels, iteration,
                                batch_size)
        for name, value in report.as_dict().items():
            if math.isnan(value):
                continue
            direction = M.MetricsReport.metric_direction(name)
            cur = best.get(name)
            if cur is None or direction * value > direction * cur.value:
                best[name] = BestScore(name, value, iteration)
    if usable == 0:
        raise FileNotFoundError(
            f"no readable checkpoints in {checkpoint_dir}")

    if "mean_f1" in best and "mean_accuracy" in best:
        combined = (best["mean_f1"].value + best["mean_accuracy"].value) / 2
        best["mean_of_best_f1_and_best_accuracy"] = BestScore(
            "mean_of_best_f1_and_best_accuracy", combined,
            max(best["mean_f1"].iteration, best["mean_accuracy"].iteration))
    return [best[k] for k in sorted(best)]


def format_best_table(rows: list[BestScore]) -> str:
    """Plain-text table in the papers' "score, (iteration in thousands)" style."""
    lines = [f"{'metric':<40} {'best':>10}  (iteration in thousands)"]
    for row in rows:
        lines.append(f"{row.metric:<40} {row.value:>10.4f}  "
                     f"({row.iteration / 1000:g})")
    return "\n".join(lines)


def best_table_csv(rows: list[BestScore]) -> str:
    lines = ["metric,best,iteration"]
    for row in rows:
        lines.append(f"{row.metric},{row.value!r},{row.iteration}")
    return "\n".join(lines) + "\n"
