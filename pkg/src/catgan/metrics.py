"""Evaluation metrics and the per-checkpoint metrics report.

These are plain numpy functions, independent of the autodiff graph; the
differentiable loss counterparts live in :mod:`catgan.losses`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

AU_IDS = (1, 2, 4, 6, 12, 15, 20, 25)
NUM_AUS = len(AU_IDS)


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

def mse(pred, obs) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ValueError("mse of empty input is undefined")
    if pred.size != obs.size:
        raise ValueError(f"length mismatch: {pred.size} vs {obs.size}")
    return float(np.mean((pred - obs) ** 2))


def ccc(x, y) -> float:
    """Concordance correlation: 2*cov / (var_x + var_y + (mean_x - mean_y)^2).

    Population (1/n) moments.  When both inputs are constant the formula is
    0/0; by convention the result is 1 if they are equal (perfect agreement)
    and 0 otherwise.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 2 or x.size != y.size:
        raise ValueError(f"ccc needs two equal-length vectors of n >= 2, "
                         f"got {x.size} and {y.size}")
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = np.mean((x - mx) * (y - my))
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        return 1.0 if mx == my else 0.0
    return float(2.0 * cov / denom)


def huber(residual, delta: float = 1.0):
    """0.5*a^2 inside |a| <= delta, delta*(|a| - delta/2) outside."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    a = np.abs(np.asarray(residual, dtype=np.float64))
    out = np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def cross_entropy(p, q) -> float:
    """H(p, q) = -sum_i p_i * log(q_i)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(-np.sum(p * np.log(q)))


def sigmoid_ce(logits, targets):
    """Per-element sigmoid cross entropy in the overflow-free form
    max(z, 0) - z*t + log(1 + exp(-|z|))."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(out) if out.ndim == 0 else out


def softmax_ce(logits, target_dist) -> float:
    """Cross entropy of a target distribution against softmax(logits)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target_dist, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    log_softmax = z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    out = -(t * log_softmax).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def fake_label(n: int, alpha: float) -> np.ndarray:
    """Target vector for generated images: n entries of (1-alpha)/n, then alpha.

    alpha < 1 spreads probability mass over the category nodes (label
    smoothing); alpha = 1 is the pure "fake" one-hot.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    out = np.full(n + 1, (1.0 - alpha) / n, dtype=np.float64)
    out[-1] = alpha
    return out


# ---------------------------------------------------------------------------
# classification metrics
# ---------------------------------------------------------------------------

@dataclass
class LabelScores:
    """Confusion-matrix scores for one binary label.

    `degenerate` is set when a zero denominator forced precision, recall or
    F1 to the conventional value 0.
    """

    precision: float
    recall: float
    f1: float
    accuracy: float
    degenerate: bool = False


def binary_scores(pred: np.ndarray, true: np.ndarray) -> LabelScores:
    pred = np.asarray(pred).astype(bool)
    true = np.asarray(true).astype(bool)
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    tn = int(np.sum(~pred & ~true))
    degenerate = False
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    accuracy = (tp + tn) / (tp + fp + fn + tn)
    return LabelScores(precision, recall, f1, accuracy, degenerate)


def classification_metrics(pred_flags, true_flags):
    """Per-label precision/recall/F1/accuracy plus the three averages.

    Returns (scores, mean_f1, mean_accuracy, mean_of_means) where
    mean_of_means = (mean_f1 + mean_accuracy) / 2, the "Mean" column of the
    result tables.
    """
    pred = np.asarray(pred_flags)
    true = np.asarray(true_flags)
    if pred.shape != true.shape or pred.ndim != 2:
        raise ValueError(
            f"expected matching B x n flag matrices, got {pred.shape} vs {true.shape}"
        )
    scores = [binary_scores(pred[:, j], true[:, j]) for j in range(pred.shape[1])]
    mean_f1 = float(np.mean([s.f1 for s in scores]))
    mean_accuracy = float(np.mean([s.accuracy for s in scores]))
    return scores, mean_f1, mean_accuracy, (mean_f1 + mean_accuracy) / 2.0


def pct_real_as_real(fake_node_probs, real_flags) -> float:
    """Fraction of real images whose fake-probability is below 0.5."""
    probs = np.asarray(fake_node_probs, dtype=np.float64)
    real = np.asarray(real_flags) == 0
    if not real.any():
        raise ValueError("no real images in batch")
    return float(np.mean(probs[real] < 0.5))


# ---------------------------------------------------------------------------
# report container
# ---------------------------------------------------------------------------

def _opt(value):
    return math.nan if value is None else float(value)


@dataclass
class MetricsReport:
    """Scores of one discriminator evaluation at a given iteration.

    Fields that do not apply to the active head variant are None and
    serialise as NaN.  `class_accuracy` is the top-1 accuracy of the
    k-class softmax head (None for the other heads).
    """

    iteration: int
    per_au: list[LabelScores] | None = None
    mean_f1: float | None = None
    mean_accuracy: float | None = None
    mean_of_means: float | None = None
    ccc_valence: float | None = None
    ccc_arousal: float | None = None
    mse_valence: float | None = None
    mse_arousal: float | None = None
    pct_real_as_real: float | None = None
    class_accuracy: float | None = None

    SCALAR_FIELDS = ("mean_f1", "mean_accuracy", "mean_of_means",
                     "ccc_valence", "ccc_arousal", "mse_valence",
                     "mse_arousal", "pct_real_as_real", "class_accuracy")

    @staticmethod
    def column_names() -> list[str]:
        cols = []
        for au in AU_IDS:
            for metric in ("precision", "recall", "f1", "accuracy"):
                cols.append(f"au{au}_{metric}")
        cols.extend(MetricsReport.SCALAR_FIELDS)
        return cols

    def values(self) -> list[float]:
        vals = []
        for j in range(NUM_AUS):
            if self.per_au is None:
                vals.extend([math.nan] * 4)
            else:
                s = self.per_au[j]
                vals.extend([s.precision, s.recall, s.f1, s.accuracy])
        vals.extend(_opt(getattr(self, name)) for name in self.SCALAR_FIELDS)
        return vals

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.column_names(), self.values()))

    def to_tsv(self, side: str) -> str:
        """One log line: iteration, side, then the report fields in order."""
        cells = [str(self.iteration), side]
        cells.extend(repr(v) for v in self.values())
        return "\t".join(cells)

    def to_json(self, side: str) -> str:
        payload = {"iteration": self.iteration, "side": side}
        payload.update(self.as_dict())
        if self.per_au is not None:
            payload["degenerate_aus"] = [
                au for au, s in zip(AU_IDS, self.per_au) if s.degenerate
            ]
        return json.dumps(payload, allow_nan=True, sort_keys=True)

    # Larger is better for every metric except the squared errors.
    LOWER_IS_BETTER = ("mse_valence", "mse_arousal")

    @staticmethod
    def metric_direction(name: str) -> int:
        return -1 if name in MetricsReport.LOWER_IS_BETTER else 1
