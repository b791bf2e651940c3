# ---------------------- simulation/data_generator.py ----------------------
# Synthetic data-generating processes and the bundled demo datasets
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from core.errors import ConfigError, DataError
from core.growth import growth_curve
from utils.data import Dataset, write_csv

logger = logging.getLogger(__name__)

DEFAULT_BETA = (1.0, 0.5, 0.25)


@dataclass(frozen=True)
class LinearGaussian:
    """
    y = intercept + X beta + N(0, sigma^2) with standard-normal features.

    ``beta`` lists the active coefficients; the remaining p - len(beta)
    features are pure noise.
    """

    p: int = 10
    beta: Sequence[float] = DEFAULT_BETA
    sigma: float = 1.0
    intercept: float = 0.0

    def __post_init__(self):
        if len(self.beta) > self.p:
            raise ConfigError(f"{len(self.beta)} active coefficients do not fit in p={self.p} features")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    @property
    def coefficients(self) -> np.ndarray:
        out = np.zeros(self.p)
        out[: len(self.beta)] = self.beta
        return out

    @property
    def active(self) -> tuple:
        return tuple(j for j, b in enumerate(self.coefficients) if b != 0.0)

    def mean_function(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(X) @ self.coefficients

    def draw(self, n: int, rng: np.random.Generator) -> Dataset:
        X = rng.standard_normal((n, self.p))
        y = self.mean_function(X) + self.sigma * rng.standard_normal(n)
        return Dataset(X, y, "regression", tuple(f"x{j + 1}" for j in range(self.p)))


def simulate_linear(n: int, beta: Sequence[float] = DEFAULT_BETA, sigma: float = 1.0,
                    intercept: float = 0.0, seed: int = 0) -> Dataset:
    """
    Linear-Gaussian sample with one standard-normal feature per coefficient.

    Zero entries of ``beta`` give pure-noise features. n must leave at least
    one residual degree of freedom for an OLS fit with intercept.
    """
    beta = tuple(float(b) for b in beta)
    if not beta:
        raise DataError("beta needs at least one coefficient")
    if n < len(beta) + 2:
        raise DataError(f"n={n} is too small for {len(beta)} features (need n >= {len(beta) + 2})")
    return LinearGaussian(len(beta), beta, sigma, intercept).draw(n, np.random.default_rng(seed))


def simulate_logistic(n: int, beta: Sequence[float], intercept: float = 0.0, seed: int = 0) -> Dataset:
    """
    Binary response with P(y=1) = expit(intercept + X beta), X standard normal.

    Parameters:
    - n (int): number of observations
    - beta (sequence): one coefficient per feature
    - intercept (float): linear predictor offset
    - seed (int): generator seed

    Returns:
    - Dataset: classification dataset with labels 0/1
    """
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=float)
    X = rng.standard_normal((n, beta.size))
    y = (rng.random(n) < expit(intercept + X @ beta)).astype(float)
    names = tuple(f"x{j + 1}" for j in range(beta.size))
    return Dataset(X, y, "classification", names, strata=y.astype(int).astype(str), class_labels=(0, 1))


def simulate_growth(n_groups: int = 10, per_group: int = 30, function: str = "von_bertalanffy",
                    L0: float = 30.0, K: float = 0.5, t0: float = -0.5,
                    sex_effects: Optional[Mapping[str, float]] = None, group_sd: float = 1.0,
                    sigma: float = 0.5, age_range=(0.5, 8.0), seed: int = 0) -> Dataset:
    """
    Length-at-age data for fish sampled in hauls.

    Sex effects shift L0, K or t0 by +/- the given amount (males +1, females
    -1). Each haul gets an L0 offset drawn with sd ``group_sd``; offsets are
    centred so they sum to zero. sigma=0 gives noiseless data.

    Returns:
    - Dataset: features (age, sex), response length, groups haul01..haulNN
    """
    if n_groups < 2 or per_group < 2:
        raise ConfigError("growth data needs at least 2 hauls of at least 2 fish")
    rng = np.random.default_rng(seed)
    n = n_groups * per_group
    age = rng.uniform(age_range[0], age_range[1], n)
    sex = rng.integers(0, 2, n).astype(float)
    contrast = 2.0 * sex - 1.0
    haul = np.repeat(np.arange(n_groups), per_group)
    offsets = rng.normal(0.0, group_sd, n_groups)
    offsets -= offsets.mean()

    effects = dict(sex_effects or {})
    L = L0 + effects.get("L", 0.0) * contrast + offsets[haul]
    k = K + effects.get("K", 0.0) * contrast
    t = t0 + effects.get("t", 0.0) * contrast
    length = growth_curve(function, age, L, k, t)
    if sigma > 0:
        length = length + sigma * rng.standard_normal(n)
    groups = np.array([f"haul{g + 1:02d}" for g in haul])
    return Dataset(np.column_stack([age, sex]), length, "regression", ("age", "sex"), groups=groups)


# ---- Bundled demos ----
def _linear_demo() -> Dataset:
    return simulate_linear(100, beta=(1.0, 0.5, 0.0, 0.0, 0.0, 0.0), sigma=1.0, seed=20240601)


def _classification_demo() -> Dataset:
    beta = (1.2, -0.8, 0.6, 0.0, 0.0, 0.4, 0.0, 0.0, 0.0, 0.0)
    return simulate_logistic(200, beta, intercept=-0.5, seed=20240602)


def _growth_demo() -> Dataset:
    return simulate_growth(10, 30, "von_bertalanffy", sex_effects={"L": 1.5}, seed=20240603)


DEMOS = {
    "linear": _linear_demo,
    "classification": _classification_demo,
    "growth": _growth_demo,
}


def demo_dataset(name: str) -> Dataset:
    """Bundled demo dataset, regenerated from a fixed seed."""
    try:
        return DEMOS[name]()
    except KeyError:
        raise ConfigError(f"unknown demo dataset '{name}'; available: {sorted(DEMOS)}") from None


def _summary(dataset: Dataset) -> Dict:
    frame = pd.DataFrame(dataset.features, columns=dataset.feature_names)
    summary = {
        "n": dataset.n,
        "p": dataset.p,
        "task": dataset.task,
        "response": {
            "mean": float(dataset.response.mean()),
            "std": float(dataset.response.std(ddof=1)),
            "min": float(dataset.response.min()),
            "max": float(dataset.response.max()),
        },
        "feature_means": {k: float(v) for k, v in frame.mean().items()},
    }
    if dataset.groups is not None:
        summary["groups"] = int(pd.unique(dataset.groups).size)
    if dataset.task == "classification":
        summary["positives"] = int(dataset.response.sum())
    return summary


def write_demo_datasets(out_dir: str = "data") -> Dict[str, str]:
    """
    Write every demo as CSV plus a ``_summary.json`` next to it.

    Returns:
    - dict: demo name -> CSV path
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name in sorted(DEMOS):
        dataset = demo_dataset(name)
        path = os.path.join(out_dir, f"{name}.csv")
        schema = write_csv(dataset, path)
        summary = {"schema": schema.to_dict(), **_summary(dataset)}
        with open(path.replace(".csv", "_summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        logger.info("demo dataset %s written to %s", name, path)
        paths[name] = path
    return paths


if __name__ == "__main__":
    from utils.logging_setup import configure_logging

    configure_logging(1)
    write_demo_datasets()
