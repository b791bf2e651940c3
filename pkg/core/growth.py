# ---------------------- core/growth.py ----------------------
# Nonlinear growth curves (Gompertz, logistic, von Bertalanffy) fitted by Levenberg-Marquardt
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from core.errors import ConvergenceError, FitError, SingularJacobianError
from core.losses import PredictionBatch
from core.models import FittedModel, ModelSpec, register_family
from utils.data import Dataset

logger = logging.getLogger(__name__)

GROWTH_FUNCTIONS = ("gompertz", "logistic", "von_bertalanffy")
SEX_TARGETS = ("L", "K", "t")

# Levenberg-Marquardt schedule
LM_DAMPING_START = 1e-3
LM_DAMPING_FACTOR = 10.0
LM_MAX_ITER = 200
LM_RTOL = 1e-10
# Stationarity when no damped step descends: cos(J'r) or relative rss at rounding level
LM_GTOL = 1e-4
LM_RSS_FLOOR = 1e-20


def growth_curve(function: str, age, L0, K, t0) -> np.ndarray:
    """Length at ``age`` for the named growth function."""
    u = np.exp(-K * (np.asarray(age, dtype=float) - t0))
    if function == "gompertz":
        return L0 * np.exp(-u)
    if function == "logistic":
        return L0 / (1.0 + u)
    if function == "von_bertalanffy":
        return L0 * (1.0 - u)
    raise FitError(f"unknown growth function '{function}'; expected one of {GROWTH_FUNCTIONS}")


def growth_jacobian(function: str, age, L0, K, t0) -> np.ndarray:
    """Partial derivatives of the curve w.r.t. (L0, K, t0); shape (len(age), 3)."""
    a = np.asarray(age, dtype=float)
    lag = a - t0
    u = np.exp(-K * lag)
    if function == "gompertz":
        value = L0 * np.exp(-u)
        cols = (np.exp(-u), value * u * lag, -value * u * K)
    elif function == "logistic":
        denom = (1.0 + u) ** 2
        cols = (1.0 / (1.0 + u), L0 * u * lag / denom, -L0 * u * K / denom)
    elif function == "von_bertalanffy":
        cols = (1.0 - u, L0 * u * lag, -L0 * u * K)
    else:
        raise FitError(f"unknown growth function '{function}'; expected one of {GROWTH_FUNCTIONS}")
    return np.column_stack([np.broadcast_to(c, a.shape) for c in cols])


@dataclass(frozen=True)
class GrowthSpec:
    function: str = "von_bertalanffy"
    sex_effect_on: FrozenSet[str] = frozenset()
    group_intercepts_on_L0: bool = True
    age_column: str = "age"
    sex_column: str = "sex"

    def __post_init__(self):
        if self.function not in GROWTH_FUNCTIONS:
            raise FitError(f"unknown growth function '{self.function}'; expected one of {GROWTH_FUNCTIONS}")
        targets = frozenset(self.sex_effect_on)
        unknown = targets - set(SEX_TARGETS)
        if unknown:
            raise FitError(f"sex effects can only act on {SEX_TARGETS}, got {sorted(unknown)}")
        object.__setattr__(self, "sex_effect_on", targets)

    @property
    def label(self) -> str:
        short = {"gompertz": "G", "logistic": "log", "von_bertalanffy": "vB"}[self.function]
        effects = "".join(t for t in SEX_TARGETS if t in self.sex_effect_on) or "0"
        return f"{short}|{effects}"

    @classmethod
    def from_hyperparameters(cls, hp) -> "GrowthSpec":
        return cls(
            function=hp.get("function", "von_bertalanffy"),
            sex_effect_on=frozenset(hp.get("sex_effect_on", ())),
            group_intercepts_on_L0=bool(hp.get("group_intercepts_on_L0", True)),
            age_column=hp.get("age_column", "age"),
            sex_column=hp.get("sex_column", "sex"),
        )

    def to_model_spec(self, complexity_rank: Optional[int] = None) -> ModelSpec:
        hp = {
            "function": self.function,
            "sex_effect_on": sorted(self.sex_effect_on),
            "group_intercepts_on_L0": self.group_intercepts_on_L0,
        }
        if self.age_column != "age":
            hp["age_column"] = self.age_column
        if self.sex_column != "sex":
            hp["sex_column"] = self.sex_column
        return ModelSpec("growth", (), hp, complexity_rank=complexity_rank, name=self.label)


class _Layout:
    """Maps the parameter vector onto per-observation (L0, K, t0)."""

    def __init__(self, gspec: GrowthSpec, levels):
        self.gspec = gspec
        self.sex_terms = [t for t in SEX_TARGETS if t in gspec.sex_effect_on]
        self.levels = list(levels)
        self.n_base = 3 + len(self.sex_terms)
        self.n_params = self.n_base + max(len(self.levels) - 1, 0)

    def offsets(self, theta):
        """Full per-level offset vector; the last level is minus the sum of the others."""
        free = theta[self.n_base:]
        return np.append(free, -np.sum(free)) if self.levels else np.zeros(0)

    def unpack(self, theta, sex, level_idx):
        L0 = np.full(sex.shape, theta[0])
        K = np.full(sex.shape, theta[1])
        t0 = np.full(sex.shape, theta[2])
        for k, target in enumerate(self.sex_terms):
            effect = theta[3 + k] * sex
            if target == "L":
                L0 = L0 + effect
            elif target == "K":
                K = K + effect
            else:
                t0 = t0 + effect
        if self.levels:
            full = np.append(self.offsets(theta), 0.0)  # index -1 means an unseen group
            L0 = L0 + full[level_idx]
        return L0, K, t0

    def jacobian(self, theta, age, sex, level_idx):
        L0, K, t0 = self.unpack(theta, sex, level_idx)
        base = growth_jacobian(self.gspec.function, age, L0, K, t0)
        J = np.zeros((age.size, self.n_params))
        J[:, :3] = base
        for k, target in enumerate(self.sex_terms):
            J[:, 3 + k] = base[:, SEX_TARGETS.index(target)] * sex
        if len(self.levels) > 1:
            G = len(self.levels)
            indicator = np.zeros((age.size, G))
            seen = level_idx >= 0
            indicator[np.flatnonzero(seen), level_idx[seen]] = 1.0
            contrast = indicator[:, :-1] - indicator[:, [-1]]
            J[:, self.n_base:] = contrast * base[:, [0]]
        return J


def _sex_contrast(data: Dataset, gspec: GrowthSpec) -> np.ndarray:
    if not gspec.sex_effect_on:
        return np.zeros(data.n)
    raw = data.column(gspec.sex_column)
    if not np.all(np.isin(raw, (0.0, 1.0))):
        raise FitError(f"sex column '{gspec.sex_column}' must be coded 0/1")
    return 2.0 * raw - 1.0


def _level_index(groups, levels) -> np.ndarray:
    lookup = {g: k for k, g in enumerate(levels)}
    return np.array([lookup.get(g, -1) for g in groups], dtype=int)


def _initial_guess(age, length, layout: _Layout) -> np.ndarray:
    span = float(age.max() - age.min()) or 1.0
    theta = np.zeros(layout.n_params)
    theta[0] = float(length.max())
    theta[1] = 1.0 / span
    theta[2] = float(age.min()) - 0.1 * span
    return theta


def fit_growth(train: Dataset, gspec: GrowthSpec, init: Optional[Dict] = None,
               spec: Optional[ModelSpec] = None) -> FittedModel:
    """
    Least-squares growth curve with optional sex contrasts and per-group L0 offsets.

    Parameters:
    - train: Dataset whose features include the age (and sex) columns and whose
      response is length; groups carry the group labels
    - gspec: GrowthSpec choosing the function and the fixed-effect structure
    - init: optional starting values {"L0", "K", "t0"}

    Returns:
    - FittedModel; group offsets sum to zero so L0 is the population mean, and
      unseen groups are predicted with offset 0.
    """
    spec = spec or gspec.to_model_spec()
    age = train.column(gspec.age_column)
    if np.any(age <= 0):
        raise FitError("growth models need positive ages")
    length = train.response
    sex = _sex_contrast(train, gspec)

    levels = []
    if gspec.group_intercepts_on_L0:
        if train.groups is None:
            raise FitError("group intercepts requested but the dataset has no groups")
        counts = pd.Series(train.groups).value_counts(sort=False)
        single = [str(g) for g, c in counts.items() if c < 2]
        if single:
            raise FitError(f"group(s) {single} have a single observation; group intercepts need at least 2")
        levels = list(pd.unique(train.groups))
        if len(levels) < 2:
            levels = []
    level_idx = _level_index(train.groups, levels) if levels else np.full(train.n, -1)
    layout = _Layout(gspec, levels)

    theta = _initial_guess(age, length, layout)
    if init:
        for k, key in enumerate(("L0", "K", "t0")):
            if key in init:
                theta[k] = float(init[key])

    def residual(th):
        L0, K, t0 = layout.unpack(th, sex, level_idx)
        return length - growth_curve(gspec.function, age, L0, K, t0)

    r = residual(theta)
    rss = float(r @ r)
    damping = LM_DAMPING_START
    for it in range(1, LM_MAX_ITER + 1):
        J = layout.jacobian(theta, age, sex, level_idx)
        JtJ = J.T @ J
        g = J.T @ r
        if np.linalg.matrix_rank(JtJ) < layout.n_params:
            raise SingularJacobianError(f"singular Jacobian at iteration {it} ({spec.model_id})")
        accepted = False
        while damping < 1e16:
            A = JtJ + damping * np.diag(np.diag(JtJ))
            try:
                step = linalg.solve(A, g, assume_a="sym")
            except linalg.LinAlgError:
                raise SingularJacobianError(f"singular damped system at iteration {it}") from None
            candidate = theta + step
            r_new = residual(candidate)
            rss_new = float(r_new @ r_new)
            if np.isfinite(rss_new) and rss_new < rss:
                accepted = True
                break
            damping *= LM_DAMPING_FACTOR
        if not accepted:
            cosine = float(np.max(np.abs(g)) / (np.linalg.norm(J) * np.sqrt(rss))) if rss > 0 else 0.0
            logger.debug("growth %s: no damped step descends at iteration %d (gradient cosine %.3g, rss=%.6g)",
                         spec.model_id, it, cosine, rss)
            if cosine > LM_GTOL and rss > LM_RSS_FLOOR * float(length @ length):
                raise ConvergenceError("Levenberg-Marquardt", it)
            break
        change = (rss - rss_new) / rss if rss > 0 else 0.0
        theta, r, rss = candidate, r_new, rss_new
        damping /= LM_DAMPING_FACTOR
        if change < LM_RTOL or rss == 0.0:
            break
    else:
        raise ConvergenceError("Levenberg-Marquardt", LM_MAX_ITER)

    offsets = layout.offsets(theta)
    logger.debug("growth %s converged after %d iterations, rss=%.6g", spec.model_id, it, rss)
    names = ["L0", "K", "t0"] + [f"{t}:sex" for t in layout.sex_terms]
    names += [f"L0:{g}" for g in levels[:-1]]
    return FittedModel(
        spec=spec,
        coefficients=theta,
        names=tuple(names),
        training_sigma=float(np.sqrt(rss / train.n)),
        n_iter=it,
        extras={
            "group_levels": [str(g) for g in levels],
            "group_offsets": offsets,
            "rss": rss,
        },
    )


def _fit_growth_spec(spec: ModelSpec, train: Dataset) -> FittedModel:
    gspec = GrowthSpec.from_hyperparameters(spec.hyperparameters)
    return fit_growth(train, gspec, spec.hyperparameters.get("init"), spec=spec)


def _predict_growth(fitted: FittedModel, data: Dataset) -> PredictionBatch:
    gspec = GrowthSpec.from_hyperparameters(fitted.spec.hyperparameters)
    levels = fitted.extras["group_levels"]
    layout = _Layout(gspec, levels)
    if levels and data.groups is not None:
        level_idx = _level_index(np.asarray(data.groups).astype(str), levels)
    else:
        level_idx = np.full(data.n, -1)
    L0, K, t0 = layout.unpack(fitted.coefficients, _sex_contrast(data, gspec), level_idx)
    mean = growth_curve(gspec.function, data.column(gspec.age_column), L0, K, t0)
    return PredictionBatch(mean=mean, sigma=np.full(mean.shape, fitted.training_sigma))


def growth_candidates(functions=GROWTH_FUNCTIONS, group_intercepts_on_L0: bool = True):
    """The 24 candidate structures: each function with every subset of sex effects."""
    subsets = [(), ("L",), ("K",), ("t",), ("L", "K"), ("L", "t"), ("K", "t"), ("L", "K", "t")]
    return [
        GrowthSpec(fn, frozenset(s), group_intercepts_on_L0).to_model_spec()
        for fn in functions
        for s in subsets
    ]


register_family("growth", _fit_growth_spec, _predict_growth)
