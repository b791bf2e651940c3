# ---------------------- core/losses.py ----------------------
# Pointwise losses, scores and confusion-matrix metrics with explicit orientation
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np

from core.errors import LossError

logger = logging.getLogger(__name__)

LOWER = "lower_is_better"
HIGHER = "higher_is_better"

# Log-loss probabilities are clamped to [EPS, 1 - EPS]
EPS = 1e-15


@dataclass(frozen=True)
class LossKind:
    name: str
    orientation: str
    needs: tuple
    pointwise: bool = True

    @property
    def higher_is_better(self) -> bool:
        return self.orientation == HIGHER

    def utility(self, value):
        """Value in the higher-is-better view."""
        return value if self.higher_is_better else -value


@dataclass(frozen=True)
class MetricKind:
    name: str
    orientation: str = HIGHER
    pointwise: bool = False

    @property
    def higher_is_better(self) -> bool:
        return True

    def utility(self, value):
        return value


LOSSES: Dict[str, LossKind] = {
    "squared_error": LossKind("squared_error", LOWER, ("mean",)),
    "absolute_error": LossKind("absolute_error", LOWER, ("mean",)),
    "gaussian_log_density": LossKind("gaussian_log_density", HIGHER, ("mean", "sigma")),
    "log_loss": LossKind("log_loss", HIGHER, ("prob",)),
    "brier": LossKind("brier", LOWER, ("prob",)),
    "spherical": LossKind("spherical", HIGHER, ("prob",)),
    "misclassification": LossKind("misclassification", LOWER, ("prob",)),
}

METRICS: Dict[str, MetricKind] = {
    name: MetricKind(name)
    for name in ("accuracy", "sensitivity", "specificity", "f1", "kappa", "tss", "mcc")
}

# Propriety and locality of the scores above
SCORE_PROPERTIES = {
    "squared_error": {"proper": True, "strictly_proper": False, "local": False},
    "absolute_error": {"proper": False, "strictly_proper": False, "local": False},
    "gaussian_log_density": {"proper": True, "strictly_proper": True, "local": True},
    "log_loss": {"proper": True, "strictly_proper": True, "local": True},
    "brier": {"proper": True, "strictly_proper": True, "local": False},
    "spherical": {"proper": True, "strictly_proper": True, "local": False},
    "misclassification": {"proper": True, "strictly_proper": False, "local": False},
}

Kind = Union[LossKind, MetricKind]


def get_kind(name) -> Kind:
    """Resolve a loss or metric by its lowercase name."""
    if isinstance(name, (LossKind, MetricKind)):
        return name
    key = str(name).lower().replace("-", "_")
    if key in LOSSES:
        return LOSSES[key]
    if key in METRICS:
        return METRICS[key]
    raise LossError(f"unknown loss or metric '{name}'; known: {sorted(LOSSES) + sorted(METRICS)}")


@dataclass(frozen=True, eq=False)
class PredictionBatch:
    """
    Prediction records for a batch of data points.

    mean: predicted response (regression)
    sigma: predictive dispersion, one value or one per point
    prob: class-1 probability (classification)
    threshold: classification threshold c (predicted positive iff prob > c)
    """

    mean: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    prob: Optional[np.ndarray] = None
    threshold: float = 0.5

    def __len__(self):
        for arr in (self.mean, self.prob):
            if arr is not None:
                return int(np.size(arr))
        return 0

    def take(self, idx) -> "PredictionBatch":
        def pick(a):
            if a is None:
                return None
            a = np.asarray(a)
            return a if a.ndim == 0 else a[idx]

        return PredictionBatch(pick(self.mean), pick(self.sigma), pick(self.prob), self.threshold)

    def with_threshold(self, c: float) -> "PredictionBatch":
        return PredictionBatch(self.mean, self.sigma, self.prob, c)


@dataclass(frozen=True)
class Prediction:
    """A single prediction record."""

    mean: Optional[float] = None
    sigma: Optional[float] = None
    prob: Optional[float] = None
    threshold: float = 0.5

    def as_batch(self) -> PredictionBatch:
        wrap = lambda v: None if v is None else np.array([float(v)])
        return PredictionBatch(wrap(self.mean), wrap(self.sigma), wrap(self.prob), self.threshold)


def _require(kind: LossKind, pred: PredictionBatch):
    missing = [f for f in kind.needs if getattr(pred, f) is None]
    if missing:
        raise LossError(f"{kind.name} needs prediction field(s) {missing}")


def loss_vector(kind, y, pred: PredictionBatch) -> np.ndarray:
    """Vectorised pointwise loss of ``pred`` at observations ``y``, in the kind's native orientation."""
    kind = get_kind(kind)
    if not isinstance(kind, LossKind):
        raise LossError(f"{kind.name} is a confusion-matrix metric, not a pointwise loss")
    _require(kind, pred)
    y = np.asarray(y, dtype=float)

    if kind.name == "squared_error":
        return (y - pred.mean) ** 2
    if kind.name == "absolute_error":
        return np.abs(y - pred.mean)
    if kind.name == "gaussian_log_density":
        sigma = np.asarray(pred.sigma, dtype=float)
        if np.any(sigma <= 0):
            raise LossError("gaussian_log_density needs a positive dispersion sigma")
        return -0.5 * np.log(2.0 * np.pi * sigma**2) - (y - pred.mean) ** 2 / (2.0 * sigma**2)

    p1 = np.asarray(pred.prob, dtype=float)
    if np.any((p1 < 0) | (p1 > 1)):
        raise LossError("class probabilities must lie in [0, 1]")
    p_obs = np.where(y == 1, p1, 1.0 - p1)
    if kind.name == "log_loss":
        return np.log(np.clip(p_obs, EPS, 1.0 - EPS))
    if kind.name == "brier":
        # sum over both classes of (indicator - probability)^2
        return (y - p1) ** 2 + ((1 - y) - (1 - p1)) ** 2
    if kind.name == "spherical":
        return p_obs / np.sqrt(p1**2 + (1 - p1) ** 2)
    if kind.name == "misclassification":
        return (y != (p1 > pred.threshold)).astype(float)
    raise LossError(f"no formula for {kind.name}")


def pointwise_loss(kind, y: float, prediction: Prediction) -> float:
    """Loss of one prediction record at observation ``y``."""
    return float(loss_vector(kind, np.array([float(y)]), prediction.as_batch())[0])


def propriety_grid(kind, q: float, step: float = 0.01):
    """
    Expected score under y ~ Bernoulli(q) for predicted p on a grid.

    Returns (grid, expected) with the expectation in the kind's native orientation.
    """
    grid = np.round(np.arange(step, 1.0, step), 10)
    ones, zeros = np.ones_like(grid), np.zeros_like(grid)
    pred = PredictionBatch(prob=grid)
    expected = q * loss_vector(kind, ones, pred) + (1 - q) * loss_vector(kind, zeros, pred)
    return grid, expected


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if v < 0:
                raise LossError(f"confusion matrix entry {name} is negative ({v})")
        if self.total < 1:
            raise LossError("confusion matrix is empty")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """Same outcomes with the positive and negative classes exchanged."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def build_confusion(probabilities, labels, c: float = 0.5) -> ConfusionMatrix:
    """Confusion matrix of thresholded probabilities; class 1 is positive, p > c predicts positive."""
    p = np.asarray(probabilities, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if p.size != y.size:
        raise LossError(f"probabilities ({p.size}) and labels ({y.size}) differ in length")
    if p.size == 0:
        raise LossError("cannot build a confusion matrix from empty input")
    if not 0.0 < c < 1.0:
        raise LossError(f"threshold must lie in (0, 1), got {c}")
    if np.any((p < 0) | (p > 1)):
        raise LossError("probabilities must lie in [0, 1]")
    predicted = p > c
    actual = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
        tn=int(np.sum(~predicted & ~actual)),
    )


def _ratio(num, den):
    return num / den if den else 0.0


def confusion_metric(m: ConfusionMatrix, kind) -> float:
    """Confusion-matrix metric; degenerate denominators give 0."""
    kind = get_kind(kind)
    if not isinstance(kind, MetricKind):
        raise LossError(f"{kind.name} is not a confusion-matrix metric")
    tp, fp, fn, tn = (float(v) for v in (m.tp, m.fp, m.fn, m.tn))
    sensitivity = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)

    if kind.name == "accuracy":
        return (tp + tn) / (tp + tn + fp + fn)
    if kind.name == "sensitivity":
        return sensitivity
    if kind.name == "specificity":
        return specificity
    if kind.name == "f1":
        return _ratio(2 * tp, 2 * tp + fp + fn)
    if kind.name == "kappa":
        return _ratio(2 * (tp * tn - fp * fn), (tp + fp) * (fp + tn) + (tp + fn) * (fn + tn))
    if kind.name == "tss":
        return sensitivity + specificity - 1.0
    if kind.name == "mcc":
        den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        return _ratio(tp * tn - fp * fn, math.sqrt(den)) if den else 0.0
    raise LossError(f"no formula for {kind.name}")


def aggregate_metric(probabilities: Sequence, labels, plan, c=0.5, kind="mcc") -> np.ndarray:
    """
    One metric value per repetition of ``plan``.

    ``probabilities[k]`` holds the class-1 probabilities for the test indices of
    split k. ``c`` is one threshold for every split or a sequence with one
    threshold per split. The confusion matrix of a repetition pools all of its
    test folds.
    """
    labels = np.asarray(labels)
    if len(probabilities) != len(plan.splits):
        raise LossError(f"expected predictions for {len(plan.splits)} splits, got {len(probabilities)}")
    thresholds = np.asarray(c, dtype=float)
    if thresholds.ndim == 0:
        thresholds = np.full(len(plan.splits), float(thresholds))
    if thresholds.shape != (len(plan.splits),):
        raise LossError(f"expected {len(plan.splits)} thresholds, got {thresholds.size}")
    values = []
    for rep, positions in sorted(plan.repetitions().items()):
        pooled = None
        for k in positions:
            split = plan.splits[k]
            p = probabilities[k]
            if p is None or np.size(p) != split.test_idx.size:
                raise LossError(f"missing predictions for split {k} (repetition {rep})")
            cm = build_confusion(p, labels[split.test_idx], float(thresholds[k]))
            pooled = cm if pooled is None else pooled + cm
        values.append(confusion_metric(pooled, kind))
    return np.array(values)
