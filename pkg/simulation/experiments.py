# ---------------------- simulation/experiments.py ----------------------
# Monte Carlo studies of cross-validation bias, variance and selection behaviour
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from core.engine import cv_score, hat_loo
from core.errors import ConfigError, FitError
from core.growth import growth_candidates
from core.models import ModelSpec, fit_ols
from core.selection import ScoreTable, TableEntry, select
from core.splitters import consistent_d, make_kfold, make_leave_d_out, make_logo, make_loo, make_repeated_kfold
from simulation.data_generator import DEFAULT_BETA, LinearGaussian, simulate_growth
from utils.data import Dataset

logger = logging.getLogger(__name__)

GENERATORS = ("linear-gaussian",)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Settings shared by every study; each study reads the fields it needs.

    complexities are nested first-k feature models; k_values may contain
    "n" for leave-one-out.
    """

    generator: str = "linear-gaussian"
    p: int = 10
    beta: Tuple[float, ...] = DEFAULT_BETA
    sigma: float = 1.0
    replicates: int = 200
    n: int = 100
    family: str = "ols"
    complexities: Tuple[int, ...] = tuple(range(9))
    model_features: Tuple[int, ...] = (0, 1, 2, 3, 4)
    k_values: Tuple = (2, 5, 10, "n")
    repeats: int = 2
    folds: int = 5
    n_values: Tuple[int, ...] = (100, 300, 1000)
    ldo_iterations: int = 100
    n_eval: int = 100
    n_truth: int = 100_000
    growth_groups: int = 10
    growth_per_group: int = 10
    growth_functions: Tuple[str, ...] = ("von_bertalanffy", "gompertz", "logistic")
    kind: str = "squared_error"
    seed: int = 0
    keep_raw: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator '{self.generator}'; available: {list(GENERATORS)}")
        if self.replicates < 2:
            raise ConfigError(f"replicates must be >= 2 (got {self.replicates})")
        for name in ("complexities", "k_values", "n_values", "model_features", "growth_functions"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} must not be empty")
        if self.family != "ols":
            raise ConfigError(f"Monte Carlo studies fit OLS candidates (got family '{self.family}')")
        if self.kind != "squared_error":
            raise ConfigError(f"Monte Carlo studies score squared error (got '{self.kind}')")
        if max(self.complexities) > self.p or max(self.model_features) >= self.p:
            raise ConfigError(f"model sizes exceed p={self.p}")

    @property
    def process(self) -> LinearGaussian:
        return LinearGaussian(self.p, self.beta, self.sigma)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**fields)


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    """
    Per-cell statistics, each with its Monte Carlo standard error.

    ``rows`` holds dicts with keys cell, statistic, value, mc_se.
    """

    name: str
    config: Dict
    rows: Tuple[Dict, ...]
    raw: Optional[Dict] = None
    extra: Dict = field(default_factory=dict)

    def value(self, cell: str, statistic: str) -> float:
        return self._row(cell, statistic)["value"]

    def se(self, cell: str, statistic: str) -> float:
        return self._row(cell, statistic)["mc_se"]

    def _row(self, cell, statistic):
        for r in self.rows:
            if r["cell"] == cell and r["statistic"] == statistic:
                return r
        raise KeyError(f"no statistic '{statistic}' for cell '{cell}' in {self.name}")

    @property
    def cells(self) -> List[str]:
        return list(dict.fromkeys(r["cell"] for r in self.rows))

    def to_frame(self) -> pd.DataFrame:
        """Tidy table: one row per cell per statistic."""
        frame = pd.DataFrame(list(self.rows), columns=["cell", "statistic", "value", "mc_se"])
        frame.insert(0, "experiment", self.name)
        return frame

    def to_dict(self):
        out = {"experiment": self.name, "config": self.config, "rows": [dict(r) for r in self.rows]}
        if self.raw is not None:
            out["raw"] = {k: np.asarray(v).tolist() for k, v in self.raw.items()}
        if self.extra:
            out["extra"] = self.extra
        return out


def _row(cell, statistic, value, mc_se):
    return {"cell": cell, "statistic": statistic, "value": float(value), "mc_se": float(mc_se)}


def _mc(values) -> Tuple[float, float]:
    """Mean and Monte Carlo standard error sd/sqrt(replicates)."""
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def _jackknife_se(stat: Callable[[np.ndarray], float], samples: np.ndarray) -> float:
    """Leave-one-replicate-out jackknife standard error of stat(samples); replicates on axis 0."""
    R = samples.shape[0]
    keep = np.ones(R, dtype=bool)
    values = np.empty(R)
    for r in range(R):
        keep[r] = False
        values[r] = stat(samples[keep])
        keep[r] = True
    return float(np.sqrt((R - 1) / R * np.sum((values - values.mean()) ** 2)))


def _binomial(successes) -> Tuple[float, float]:
    p = float(np.mean(successes))
    return p, float(np.sqrt(p * (1.0 - p) / len(successes)))


def _replicate_rngs(cfg: ExperimentConfig, stream: int = 0) -> List[np.random.Generator]:
    children = np.random.SeedSequence([cfg.seed, stream]).spawn(cfg.replicates)
    return [np.random.default_rng(c) for c in children]


def _plan_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def _map(cfg: ExperimentConfig, fn, rngs, *args):
    return Parallel(n_jobs=cfg.n_jobs)(delayed(fn)(cfg, rng, *args) for rng in rngs)


# ---- Bias-variance decomposition ----
def _bias_variance_replicate(cfg: ExperimentConfig, rng, eval_data: Dataset):
    process = cfg.process
    train = process.draw(cfg.n, rng)
    y_star = eval_data.response + cfg.sigma * rng.standard_normal(eval_data.n)
    preds, loo = [], []
    for k in cfg.complexities:
        features = tuple(range(k))
        preds.append(fit_ols(train, features).predict(eval_data).mean)
        loo.append(hat_loo(train, features).mean)
    return np.array(preds), y_star, np.array(loo)


def run_bias_variance(cfg: ExperimentConfig) -> ExperimentReport:
    """
    Squared-loss decomposition at fixed evaluation points over replicate
    training sets: expected loss = bias^2 + variance + sigma^2.

    bias^2 uses the unbiased form (f - mean yhat)^2 - var/R; the residual is
    the per-replicate decomposition error averaged over replicates.
    """
    process = cfg.process
    eval_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 99]))
    X_eval = eval_rng.standard_normal((cfg.n_eval, cfg.p))
    f = process.mean_function(X_eval)
    eval_data = Dataset(X_eval, f, "regression", tuple(f"x{j + 1}" for j in range(cfg.p)))

    results = _map(cfg, _bias_variance_replicate, _replicate_rngs(cfg), eval_data)
    yhat = np.stack([r[0] for r in results])  # replicates x complexities x eval points
    y_star = np.stack([r[1] for r in results])
    loo = np.stack([r[2] for r in results])
    R = cfg.replicates
    noise = cfg.sigma**2

    def bias2(s):
        return float(np.mean((f - s.mean(axis=0)) ** 2 - s.var(axis=0, ddof=1) / s.shape[0]))

    def variance(s):
        return float(np.mean(s.var(axis=0, ddof=1)))

    rows = []
    for c, k in enumerate(cfg.complexities):
        cell = f"k={k}"
        s = yhat[:, c, :]
        centre = s.mean(axis=0)
        losses = np.mean((s - y_star) ** 2, axis=1)
        residuals = np.mean((s - y_star) ** 2 - (f - centre) ** 2 - (s - centre) ** 2, axis=1) - noise
        rows.append(_row(cell, "bias2", bias2(s), _jackknife_se(bias2, s)))
        rows.append(_row(cell, "variance", variance(s), _jackknife_se(variance, s)))
        rows.append(_row(cell, "expected_loss", *_mc(losses)))
        rows.append(_row(cell, "noise", noise, 0.0))
        rows.append(_row(cell, "residual", *_mc(residuals)))
        rows.append(_row(cell, "loo_estimate", *_mc(loo[:, c])))
        logger.debug("bias-variance %s: loss=%.4f", cell, losses.mean())

    raw = {"yhat_mean": yhat.mean(axis=0), "loo": loo} if cfg.keep_raw else None
    return ExperimentReport("bias-variance", cfg.to_dict(), tuple(rows), raw)


# ---- Choice of K ----
def _true_score(process: LinearGaussian, cfg: ExperimentConfig, rng, fitted) -> float:
    truth = process.draw(cfg.n_truth, rng)
    return float(np.mean((truth.response - fitted.predict(truth).mean) ** 2))


def _k_label(k, n) -> str:
    return "loo" if k in ("n", n) else f"K={k}"


def _k_bias_replicate(cfg: ExperimentConfig, rng):
    process = cfg.process
    data = process.draw(cfg.n, rng)
    spec = ModelSpec("ols", cfg.model_features)
    truth = _true_score(process, cfg, rng, fit_ols(data, spec=spec))
    estimates, corrected = {}, {}
    for k in cfg.k_values:
        label = _k_label(k, cfg.n)
        if label == "loo":
            estimates[label] = hat_loo(data, cfg.model_features).mean
            corrected[label] = estimates[label]
            continue
        est = cv_score(spec, data, make_kfold(cfg.n, int(k), _plan_seed(rng)), "squared_error",
                       want_bias_correction=True)
        estimates[label] = est.mean
        corrected[label] = est.corrected_mean
    return truth, estimates, corrected


def run_k_bias_study(cfg: ExperimentConfig) -> ExperimentReport:
    """
    Bias of K-fold estimates against an independent large test set, with and
    without the additive bias correction. Gaps are paired differences with
    leave-one-out on the same replicate.
    """
    results = _map(cfg, _k_bias_replicate, _replicate_rngs(cfg, 1))
    truth = np.array([r[0] for r in results])
    labels = [_k_label(k, cfg.n) for k in cfg.k_values]
    rows = [_row("truth", "true_score", *_mc(truth))]
    for label in labels:
        est = np.array([r[1][label] for r in results])
        cor = np.array([r[2][label] for r in results])
        rows.append(_row(label, "estimate", *_mc(est)))
        rows.append(_row(label, "bias", *_mc(est - truth)))
        rows.append(_row(label, "corrected_bias", *_mc(cor - truth)))
        if "loo" in labels and label != "loo":
            loo = np.array([r[1]["loo"] for r in results])
            rows.append(_row(label, "gap_vs_loo", *_mc(est - loo)))
            rows.append(_row(label, "corrected_gap_vs_loo", *_mc(cor - loo)))
    for a, b in zip(labels, labels[1:]):
        est_a = np.array([r[1][a] for r in results])
        est_b = np.array([r[1][b] for r in results])
        rows.append(_row(f"{a} vs {b}", "abs_bias_gap", *_mc(np.abs(est_a - truth) - np.abs(est_b - truth))))
        rows.append(_row(f"{a} vs {b}", "estimate_gap", *_mc(est_a - est_b)))
    raw = {"truth": truth} if cfg.keep_raw else None
    return ExperimentReport("k-bias", cfg.to_dict(), tuple(rows), raw)


# ---- Repeated K-fold versus one larger K ----
def _repeat_replicate(cfg: ExperimentConfig, rng):
    process = cfg.process
    data = process.draw(cfg.n, rng)
    spec = ModelSpec("ols", cfg.model_features)
    truth = _true_score(process, cfg, rng, fit_ols(data, spec=spec))
    seed = _plan_seed(rng)
    repeated = cv_score(spec, data, make_repeated_kfold(cfg.n, cfg.folds, cfg.repeats, seed)).mean
    single = cv_score(spec, data, make_kfold(cfg.n, cfg.folds * cfg.repeats, seed)).mean
    return truth, repeated, single


def run_repeat_vs_large_k(cfg: ExperimentConfig) -> ExperimentReport:
    """R repetitions of K-fold against one (R*K)-fold over the same replicates."""
    big_k = cfg.repeats * cfg.folds
    if big_k > cfg.n:
        raise ConfigError(f"R*K = {big_k} exceeds n = {cfg.n}")
    results = _map(cfg, _repeat_replicate, _replicate_rngs(cfg, 2))
    truth = np.array([r[0] for r in results])
    repeated = np.array([r[1] for r in results])
    single = np.array([r[2] for r in results])
    cells = {f"{cfg.repeats}x{cfg.folds}-fold": repeated, f"{big_k}-fold": single}

    def var(s):
        return float(np.var(s, ddof=1))

    rows = [_row("truth", "true_score", *_mc(truth))]
    for cell, est in cells.items():
        rows.append(_row(cell, "estimate", *_mc(est)))
        rows.append(_row(cell, "bias", *_mc(est - truth)))
        rows.append(_row(cell, "variance", var(est), _jackknife_se(var, est)))
        rows.append(_row(cell, "error_variance", var(est - truth), _jackknife_se(var, est - truth)))
    rows.append(_row("repeated vs single", "abs_bias_gap", *_mc(np.abs(repeated - truth) - np.abs(single - truth))))
    rows.append(_row("repeated vs single", "estimate_gap", *_mc(repeated - single)))
    return ExperimentReport("repeat-vs-large-k", cfg.to_dict(), tuple(rows))


# ---- Consistency of leave-d-out selection ----
def _best_k(values: Sequence[float]) -> int:
    return int(np.argmin(values))


def _consistency_replicate(cfg: ExperimentConfig, rng, n: int):
    process = cfg.process
    data = process.draw(n, rng)
    ks = list(range(cfg.p + 1))
    loo = [hat_loo(data, tuple(range(k))).mean for k in ks]
    plan = make_leave_d_out(n, consistent_d(n), cfg.ldo_iterations, _plan_seed(rng))
    ldo = [cv_score(ModelSpec("ols", tuple(range(k))), data, plan).mean for k in ks]
    return ks[_best_k(loo)], ks[_best_k(ldo)]


def run_consistency_demo(cfg: ExperimentConfig) -> ExperimentReport:
    """
    Frequency with which nested OLS selection recovers the true model size,
    by leave-one-out and by leave-d-out with the consistent test size.
    """
    true_k = len(cfg.process.active)
    if cfg.process.active != tuple(range(true_k)):
        raise ConfigError("the consistency study needs the active features first")
    rows = []
    for stream, n in enumerate(cfg.n_values):
        results = _map(cfg, _consistency_replicate, _replicate_rngs(cfg, 10 + stream), n)
        loo_k = np.array([r[0] for r in results])
        ldo_k = np.array([r[1] for r in results])
        cell = f"n={n}"
        rows.append(_row(cell, "d", consistent_d(n), 0.0))
        rows.append(_row(cell, "loo_true_rate", *_binomial(loo_k == true_k)))
        rows.append(_row(cell, "ldo_true_rate", *_binomial(ldo_k == true_k)))
        rows.append(_row(cell, "loo_overfit_rate", *_binomial(loo_k > true_k)))
        rows.append(_row(cell, "ldo_overfit_rate", *_binomial(ldo_k > true_k)))
        logger.info("consistency n=%d: LOO %.3f, leave-d-out %.3f", n, np.mean(loo_k == true_k),
                    np.mean(ldo_k == true_k))
    return ExperimentReport("consistency", cfg.to_dict(), tuple(rows))


# ---- Conditional versus marginal focus for growth models ----
def _growth_table(candidates, data, plan, focus) -> ScoreTable:
    entries = []
    for spec in candidates:
        try:
            est = cv_score(spec, data, plan, "gaussian_log_density")
        except FitError as exc:
            logger.warning("%s focus: dropping %s (%s)", focus, spec.model_id, exc)
            continue
        entries.append(TableEntry(spec.model_id, est, spec.complexity_rank))
    return ScoreTable(tuple(entries), data.n)


def run_growth_foci(cfg: ExperimentConfig) -> ExperimentReport:
    """
    Growth candidates scored by leave-one-out (prediction within known hauls)
    and leave-one-group-out (prediction to new hauls), each with a selection
    result carrying sigma_diff against the best candidate.
    """
    data = simulate_growth(cfg.growth_groups, cfg.growth_per_group, sex_effects={"L": 1.5}, seed=cfg.seed)
    candidates = growth_candidates(cfg.growth_functions)
    rows, extra = [], {}
    for focus, plan in (("conditional", make_loo(data.n)), ("marginal", make_logo(data.groups))):
        table = _growth_table(candidates, data, plan, focus)
        result = select(table, "ose_diff")
        extra[focus] = result.to_dict()
        for row in result.models:
            cell = f"{focus}:{row.id}"
            rows.append(_row(cell, "mean", row.mean, row.se))
            rows.append(_row(cell, "delta", row.delta, row.sigma_diff or 0.0))
    return ExperimentReport("growth-foci", cfg.to_dict(), tuple(rows), extra=extra)


EXPERIMENTS: Dict[str, Tuple[Callable[[ExperimentConfig], ExperimentReport], Dict]] = {
    "bias-variance": (run_bias_variance, {}),
    "k-bias": (run_k_bias_study, {}),
    "repeat-vs-large-k": (run_repeat_vs_large_k, {}),
    "consistency": (run_consistency_demo, {"replicates": 100}),
    "growth-foci": (run_growth_foci, {"replicates": 2}),
}


def default_config(name: str, **overrides) -> ExperimentConfig:
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{name}'; available: {sorted(EXPERIMENTS)}")
    settings = {**EXPERIMENTS[name][1], **{k: v for k, v in overrides.items() if v is not None}}
    return ExperimentConfig(**settings)


def run_experiment(name: str, cfg: Optional[ExperimentConfig] = None, **overrides) -> ExperimentReport:
    """Run a named study with its defaults, ``cfg`` or keyword overrides."""
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{name}'; available: {sorted(EXPERIMENTS)}")
    cfg = default_config(name, **overrides) if cfg is None else replace(cfg, **overrides)
    logger.info("running %s with %d replicates (seed %d)", name, cfg.replicates, cfg.seed)
    return EXPERIMENTS[name][0](cfg)
