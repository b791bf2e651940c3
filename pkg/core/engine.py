# ---------------------- core/engine.py ----------------------
# Cross-validated score estimation, bias correction, hat-matrix LOO and tuning
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from core.errors import ConfigError, FitError, LossError, PlanError, SplitFitError
from core.losses import (
    LOSSES,
    LossKind,
    MetricKind,
    PredictionBatch,
    aggregate_metric,
    get_kind,
    loss_vector,
)
from core.models import FittedModel, ModelSpec, fit_model, fit_ols, lambda_path
from core.splitters import FoldPlan, loo_fingerprint, make_nested
from utils.data import Dataset

logger = logging.getLogger(__name__)

# Classification thresholds searched when tuning c
THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))

# Leverage at or above 1 - HAT_TOL counts as a self-determined point
HAT_TOL = 1e-10

SE_POINTWISE = "pointwise"
SE_REPETITIONS = "repetitions"
SE_SINGLE = "single"


@dataclass(frozen=True, eq=False)
class PointwiseLosses:
    """Losses at every tested datum, sorted by datum position in the plan."""

    values: np.ndarray
    index: np.ndarray
    kind: str

    def __len__(self):
        return int(self.values.size)

    def to_dict(self):
        return {"kind": self.kind, "index": self.index.tolist(), "values": self.values.tolist()}


@dataclass(frozen=True, eq=False)
class ScoreEstimate:
    """
    A cross-validated score for one model on one plan.

    mean and se are in the kind's native orientation. se_method records how
    se was obtained: sd(pointwise)/sqrt(m) for single-repetition plans,
    sd(per-repetition means) for repeated plans, 0 for one pooled metric value.
    """

    kind: Union[LossKind, MetricKind]
    mean: float
    se: float
    model_id: str
    plan_fingerprint: str
    se_method: str = SE_POINTWISE
    pointwise: Optional[PointwiseLosses] = None
    per_repetition: Optional[np.ndarray] = None
    bias_correction_kappa: Optional[float] = None
    corrected_mean: Optional[float] = None
    corrected_pointwise: Optional[np.ndarray] = None
    n_effective_params: Optional[float] = None
    n_fits: int = 0

    @property
    def utility(self) -> float:
        return float(self.kind.utility(self.mean))

    def paired_vector(self) -> np.ndarray:
        """Vector aligned across models on the same plan: pointwise losses or per-repetition scores."""
        if self.per_repetition is not None and self.se_method == SE_REPETITIONS:
            return self.per_repetition
        if self.pointwise is not None:
            return self.pointwise.values
        return self.per_repetition if self.per_repetition is not None else np.array([self.mean])

    def to_dict(self, include_pointwise: bool = True):
        out = {
            "kind": self.kind.name,
            "orientation": self.kind.orientation,
            "mean": float(self.mean),
            "utility": self.utility,
            "se": float(self.se),
            "se_method": self.se_method,
            "model_id": self.model_id,
            "plan_fingerprint": self.plan_fingerprint,
            "per_repetition": None if self.per_repetition is None else self.per_repetition.tolist(),
            "bias_correction_kappa": _opt_float(self.bias_correction_kappa),
            "corrected_mean": _opt_float(self.corrected_mean),
            "n_effective_params": _opt_float(self.n_effective_params),
            "n_fits": int(self.n_fits),
        }
        if include_pointwise:
            out["pointwise"] = None if self.pointwise is None else self.pointwise.to_dict()
            out["corrected_pointwise"] = (
                None if self.corrected_pointwise is None else self.corrected_pointwise.tolist()
            )
        return out


def _opt_float(v):
    return None if v is None else float(v)


@dataclass(frozen=True, eq=False)
class PredictionGrid:
    """
    Predictions of every split's fitted model.

    ``rows[k]`` lists the data positions covered by ``batches[k]``. With
    bias correction requested every split covers all n data; otherwise
    only its test points.
    """

    n: int
    batches: Tuple[PredictionBatch, ...]
    rows: Tuple[np.ndarray, ...]

    @property
    def complete(self) -> bool:
        return all(r.size == self.n and np.array_equal(r, np.arange(self.n)) for r in self.rows)

    def loss_matrix(self, kind, y) -> np.ndarray:
        """Splits x data matrix of losses; requires a complete grid."""
        for k, r in enumerate(self.rows):
            if r.size != self.n or not np.array_equal(r, np.arange(self.n)):
                raise PlanError(f"prediction grid is incomplete: split {k} predicts {r.size} of {self.n} data")
        return np.vstack([loss_vector(kind, y, batch) for batch in self.batches])


def pointwise_bias_correction(grid: PredictionGrid, data: Dataset, kind, within_sample_fit: FittedModel) -> np.ndarray:
    """kappa_i = L(y_i, full-data prediction) - average over splits of L(y_i, split prediction)."""
    kind = get_kind(kind)
    full = loss_vector(kind, data.response, within_sample_fit.predict(data))
    return full - grid.loss_matrix(kind, data.response).mean(axis=0)


def bias_correct(grid: PredictionGrid, data: Dataset, kind, within_sample_fit: FittedModel) -> float:
    """Additive correction kappa; the corrected score is mean + kappa."""
    return float(np.mean(pointwise_bias_correction(grid, data, kind, within_sample_fit)))


# ---- Split evaluation ----
def _fit_on(spec: ModelSpec, data: Dataset, rows, split_id) -> FittedModel:
    try:
        return fit_model(spec, data.subset(rows))
    except (FitError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, SplitFitError):
            raise
        raise SplitFitError(split_id, exc, spec.model_id) from exc


def _evaluate_split(k: int, spec: ModelSpec, data: Dataset, train_idx, test_idx, full_grid: bool):
    """Fit on one training set; predict its test set, or every datum when full_grid."""
    fitted = _fit_on(spec, data, train_idx, k)
    if full_grid:
        return fitted.predict(data)
    return fitted.predict(data.subset(test_idx))


def _run_splits(spec: ModelSpec, data: Dataset, plan: FoldPlan, full_grid: bool, n_jobs: int) -> PredictionGrid:
    if plan.n != data.n:
        raise PlanError(f"plan is for n={plan.n} but the dataset has n={data.n}")
    batches = Parallel(n_jobs=n_jobs)(
        delayed(_evaluate_split)(k, spec, data, s.train_idx, s.test_idx, full_grid)
        for k, s in enumerate(plan.splits)
    )
    everything = np.arange(data.n)
    rows = tuple(everything if full_grid else s.test_idx for s in plan.splits)
    return PredictionGrid(data.n, tuple(batches), rows)


def _test_batch(grid: PredictionGrid, plan: FoldPlan, k: int) -> PredictionBatch:
    batch = grid.batches[k]
    if grid.rows[k].size == plan.n and plan.splits[k].test_idx.size != plan.n:
        return batch.take(plan.splits[k].test_idx)
    return batch


def _summarise_losses(kind: LossKind, plan: FoldPlan, test_losses: Sequence[np.ndarray]) -> Dict:
    """Mean, se and the pairing vector from per-split test losses."""
    reps = plan.repetitions()
    if len(reps) == 1:
        values = np.concatenate(test_losses)
        index = np.concatenate([s.test_idx for s in plan.splits])
        order = np.argsort(index, kind="stable")
        values, index = values[order], index[order]
        m = values.size
        se = float(np.std(values, ddof=1) / np.sqrt(m)) if m > 1 else 0.0
        return {
            "mean": float(np.mean(values)),
            "se": se,
            "se_method": SE_POINTWISE,
            "pointwise": PointwiseLosses(values, index, kind.name),
            "per_repetition": None,
        }
    per_rep = np.array([
        np.mean(np.concatenate([test_losses[k] for k in positions]))
        for _, positions in sorted(reps.items())
    ])
    return {
        "mean": float(np.mean(per_rep)),
        "se": float(np.std(per_rep, ddof=1)),
        "se_method": SE_REPETITIONS,
        "pointwise": None,
        "per_repetition": per_rep,
    }


def _log_score_kind(data: Dataset) -> LossKind:
    return LOSSES["log_loss"] if data.task == "classification" else LOSSES["gaussian_log_density"]


def cv_score(model: ModelSpec, data: Dataset, plan: FoldPlan, kind="squared_error",
             want_bias_correction: bool = False, threshold: float = 0.5, n_jobs: int = 1) -> ScoreEstimate:
    """
    Cross-validated pointwise-loss score of ``model`` under ``plan``.

    The model is fitted once per split. With ``want_bias_correction`` every
    split's fit also predicts the whole dataset, and the additive correction
    is computed from those predictions plus one within-sample fit.
    """
    kind = get_kind(kind)
    if not isinstance(kind, LossKind):
        raise LossError(f"{kind.name} is not a pointwise loss; use cv_metric")
    grid = _run_splits(model, data, plan, want_bias_correction, n_jobs)
    test_losses = [
        loss_vector(kind, data.response[s.test_idx], _test_batch(grid, plan, k).with_threshold(threshold))
        for k, s in enumerate(plan.splits)
    ]
    summary = _summarise_losses(kind, plan, test_losses)
    n_fits = len(plan)

    kappa = corrected = corrected_pw = p_eff = None
    if want_bias_correction:
        full_fit = fit_model(model, data)
        n_fits += 1
        thresholded = PredictionGrid(grid.n, tuple(b.with_threshold(threshold) for b in grid.batches), grid.rows)
        kappa = bias_correct(thresholded, data, kind, full_fit)
        corrected = summary["mean"] + kappa
        if summary["pointwise"] is not None and plan.is_partition:
            corrected_pw = summary["pointwise"].values + pointwise_bias_correction(thresholded, data, kind, full_fit)
        if kind == _log_score_kind(data) and plan.is_partition and plan.n_repetitions == 1:
            within = loss_vector(kind, data.response, full_fit.predict(data))
            p_eff = float(np.sum(within) - np.sum(summary["pointwise"].values))
        logger.debug("bias correction for %s: kappa=%.6g", model.model_id, kappa)

    return ScoreEstimate(
        kind=kind,
        model_id=model.model_id,
        plan_fingerprint=plan.fingerprint(),
        bias_correction_kappa=kappa,
        corrected_mean=corrected,
        corrected_pointwise=corrected_pw,
        n_effective_params=p_eff,
        n_fits=n_fits,
        **summary,
    )


def _summarise_metric(kind: MetricKind, per_rep: np.ndarray) -> Dict:
    if per_rep.size == 1:
        return {"mean": float(per_rep[0]), "se": 0.0, "se_method": SE_SINGLE, "per_repetition": per_rep}
    return {
        "mean": float(np.mean(per_rep)),
        "se": float(np.std(per_rep, ddof=1)),
        "se_method": SE_REPETITIONS,
        "per_repetition": per_rep,
    }


def _require_classification(data: Dataset, kind):
    if data.task != "classification":
        raise LossError(f"{kind.name} needs a classification dataset")


def cv_metric(model: ModelSpec, data: Dataset, plan: FoldPlan, kind="mcc", threshold: float = 0.5,
              n_jobs: int = 1) -> ScoreEstimate:
    """Confusion-matrix metric per repetition; each repetition pools its test folds."""
    kind = get_kind(kind)
    if not isinstance(kind, MetricKind):
        raise LossError(f"{kind.name} is a pointwise loss; use cv_score")
    _require_classification(data, kind)
    grid = _run_splits(model, data, plan, False, n_jobs)
    probabilities = [b.prob for b in grid.batches]
    if any(p is None for p in probabilities):
        raise LossError(f"model {model.model_id} does not predict class probabilities")
    per_rep = aggregate_metric(probabilities, data.response, plan, threshold, kind)
    return ScoreEstimate(
        kind=kind,
        model_id=model.model_id,
        plan_fingerprint=plan.fingerprint(),
        n_fits=len(plan),
        **_summarise_metric(kind, per_rep),
    )


def estimate(model: ModelSpec, data: Dataset, plan: FoldPlan, kind, want_bias_correction: bool = False,
             threshold: float = 0.5, n_jobs: int = 1) -> ScoreEstimate:
    """cv_score for pointwise losses, cv_metric for confusion-matrix metrics."""
    kind = get_kind(kind)
    if isinstance(kind, MetricKind):
        return cv_metric(model, data, plan, kind, threshold, n_jobs)
    return cv_score(model, data, plan, kind, want_bias_correction, threshold, n_jobs)


def effective_params(data: Dataset, model: ModelSpec, plan: FoldPlan, n_jobs: int = 1) -> float:
    """
    Effective number of parameters: within-sample minus cross-validated total
    log score (Gaussian log density for regression, log loss for classification).
    """
    if plan.n_repetitions != 1 or not plan.is_partition:
        raise PlanError("effective parameters need a plan that tests every datum exactly once")
    kind = _log_score_kind(data)
    cv = cv_score(model, data, plan, kind, n_jobs=n_jobs)
    full_fit = fit_model(model, data)
    within = loss_vector(kind, data.response, full_fit.predict(data))
    return float(np.sum(within) - np.sum(cv.pointwise.values))


def hat_loo(data: Dataset, included_features: Sequence[int]) -> ScoreEstimate:
    """Exact OLS leave-one-out squared error from one fit: ((y_i - yhat_i) / (1 - h_ii))^2."""
    spec = ModelSpec("ols", tuple(included_features))
    fitted = fit_ols(data, spec=spec)
    h = fitted.hat_values
    bad = np.flatnonzero(h >= 1.0 - HAT_TOL)
    if bad.size:
        i = int(bad[0])
        raise FitError(
            f"observation {i} (row {int(data.index[i])}) has leverage h={h[i]:.12g}; "
            "it determines its own fit and has no leave-one-out prediction"
        )
    resid = data.response - data.design(spec.features) @ fitted.coefficients
    values = (resid / (1.0 - h)) ** 2
    kind = LOSSES["squared_error"]
    return ScoreEstimate(
        kind=kind,
        mean=float(np.mean(values)),
        se=float(np.std(values, ddof=1) / np.sqrt(values.size)),
        model_id=spec.model_id,
        plan_fingerprint=loo_fingerprint(data.n),
        se_method=SE_POINTWISE,
        pointwise=PointwiseLosses(values, np.arange(data.n), kind.name),
        n_fits=1,
    )


# ---- Nested tuning ----
@dataclass(frozen=True)
class NestedChoice:
    model_id: str
    outer_split: int
    hyperparameters: Dict
    threshold: float
    inner_score: Optional[float]

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "outer_split": self.outer_split,
            "hyperparameters": {k: _plain(v) for k, v in self.hyperparameters.items()},
            "threshold": self.threshold,
            "inner_score": self.inner_score,
        }


@dataclass(frozen=True, eq=False)
class NestedResult:
    """
    Outer scores per candidate plus the per-outer-split choices.

    ``touched`` maps (model_id, outer split) to every datum used by that
    split's inner computations.
    """

    estimates: Dict[str, ScoreEstimate]
    choices: Tuple[NestedChoice, ...]
    touched: Dict[Tuple[str, int], frozenset] = field(default_factory=dict)

    def choices_for(self, model_id: str) -> List[NestedChoice]:
        return [c for c in self.choices if c.model_id == model_id]

    def to_dict(self):
        return {
            "estimates": {mid: est.to_dict(include_pointwise=False) for mid, est in self.estimates.items()},
            "choices": [c.to_dict() for c in self.choices],
        }


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def _expand_grid(grid: Optional[Mapping], model_id: str) -> List[Dict]:
    if not grid:
        return [{}]
    keys = sorted(grid)
    for key in keys:
        if len(grid[key]) == 0:
            raise ConfigError(f"hyperparameter grid for {model_id} has no values for '{key}'")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _threshold_dependent(kind) -> bool:
    return isinstance(kind, MetricKind) or kind.name == "misclassification"


def _inner_utility(kind, inner_plan: FoldPlan, labels, batches, c: float) -> float:
    """Inner score as a utility; ``labels`` are the outer training responses."""
    if isinstance(kind, MetricKind):
        return float(aggregate_metric([b.prob for b in batches], labels, inner_plan, c, kind)[0])
    losses = np.concatenate([
        loss_vector(kind, labels[s.test_idx], b.with_threshold(c)) for s, b in zip(inner_plan.splits, batches)
    ])
    return float(kind.utility(np.mean(losses)))


def _nested_outer(k: int, candidate: ModelSpec, configs: List[Dict], data: Dataset, outer: FoldPlan,
                  inner_splits, inner_plan: FoldPlan, kind, thresholds: Sequence[float]):
    """Inner selection on the outer training set, then refit and predict the outer test set."""
    touched: Set[int] = set()
    best_hp, best_c, best_score = configs[0], thresholds[0], None
    if len(configs) > 1 or len(thresholds) > 1:
        outer_labels = data.response[outer.splits[k].train_idx]
        for hp in configs:
            spec = candidate.with_hyperparameters(**hp)
            batches = []
            for j, (train, test) in enumerate(inner_splits):
                touched.update(train.tolist())
                touched.update(test.tolist())
                fitted = _fit_on(spec, data, train, f"{k}.{j}")
                batches.append(fitted.predict(data.subset(test)))
            for c in thresholds:
                score = _inner_utility(kind, inner_plan, outer_labels, batches, c)
                if best_score is None or score > best_score:
                    best_hp, best_c, best_score = hp, c, score

    split = outer.splits[k]
    fitted = _fit_on(candidate.with_hyperparameters(**best_hp), data, split.train_idx, k)
    batch = fitted.predict(data.subset(split.test_idx)).with_threshold(best_c)
    choice = NestedChoice(candidate.model_id, k, dict(best_hp), float(best_c), best_score)
    return choice, batch, frozenset(touched)


def tune_nested(candidates: Sequence[ModelSpec], grids, data: Dataset, outer: FoldPlan, inner_K: int,
                kind, tune_threshold: bool = False, threshold: float = 0.5, seed: int = 0,
                n_jobs: int = 1) -> NestedResult:
    """
    Nested cross-validation.

    For every candidate and outer split, an inner K-fold on the outer training
    set picks the hyperparameters (and the threshold c when tune_threshold)
    with the best inner score; the first best wins ties. The tuned model is
    refitted on the whole outer training set and scored on the outer test set.
    ``grids`` is one mapping name -> values shared by all candidates, or one
    mapping per candidate.
    """
    kind = get_kind(kind)
    if not candidates:
        raise ConfigError("nested tuning needs at least one candidate")
    if isinstance(kind, MetricKind):
        _require_classification(data, kind)
    if tune_threshold and not _threshold_dependent(kind):
        raise LossError(f"threshold tuning needs a confusion-matrix metric or misclassification, not {kind.name}")
    if grids is None or isinstance(grids, Mapping):
        grids = [grids] * len(candidates)
    if len(grids) != len(candidates):
        raise ConfigError(f"got {len(grids)} grids for {len(candidates)} candidates")
    if outer.n != data.n:
        raise PlanError(f"plan is for n={outer.n} but the dataset has n={data.n}")

    nested = make_nested(outer, inner_K, seed)
    thresholds = THRESHOLD_GRID if tune_threshold else (threshold,)
    estimates: Dict[str, ScoreEstimate] = {}
    choices: List[NestedChoice] = []
    touched: Dict[Tuple[str, int], frozenset] = {}

    for candidate, grid in zip(candidates, grids):
        configs = _expand_grid(grid, candidate.model_id)
        results = Parallel(n_jobs=n_jobs)(
            delayed(_nested_outer)(k, candidate, configs, data, outer, nested.inner_original(k),
                                    nested.inner[k], kind, thresholds)
            for k in range(len(outer))
        )
        batches = []
        for k, (choice, batch, used) in enumerate(results):
            choices.append(choice)
            batches.append(batch)
            touched[(candidate.model_id, k)] = used

        if isinstance(kind, MetricKind):
            per_rep = aggregate_metric([b.prob for b in batches], data.response, outer,
                                       [c.threshold for c, _, _ in results], kind)
            summary = _summarise_metric(kind, per_rep)
        else:
            test_losses = [loss_vector(kind, data.response[s.test_idx], b) for s, b in zip(outer.splits, batches)]
            summary = _summarise_losses(kind, outer, test_losses)
        estimates[candidate.model_id] = ScoreEstimate(
            kind=kind,
            model_id=candidate.model_id,
            plan_fingerprint=outer.fingerprint(),
            n_fits=len(outer) * (1 + (len(configs) * inner_K if len(configs) * len(thresholds) > 1 else 0)),
            **summary,
        )
        chosen = {str(c.hyperparameters) for c, _, _ in results}
        if len(chosen) > 1:
            logger.info("%s: hyperparameter choice varies across outer splits (%d distinct)",
                        candidate.model_id, len(chosen))

    return NestedResult(estimates, tuple(choices), touched)


# ---- Lambda tuning ----
@dataclass(frozen=True, eq=False)
class LambdaTuning:
    alpha: float
    lambdas: np.ndarray
    estimates: Tuple[ScoreEstimate, ...]
    nonzero: np.ndarray
    best_lambda: float
    one_se_lambda: float
    rule: str
    selection: object = None

    @property
    def chosen_lambda(self) -> float:
        return self.one_se_lambda if self.rule == "one_se" else self.best_lambda

    def to_dict(self):
        sigma_diff = {}
        if self.selection is not None:
            sigma_diff = {m["id"]: m["sigma_diff"] for m in self.selection.to_dict()["models"]}
        curve = [
            {
                "lambda": float(lam),
                "mean": est.mean,
                "se": est.se,
                "nonzero": int(nz),
                "sigma_diff": sigma_diff.get(est.model_id),
            }
            for lam, est, nz in zip(self.lambdas, self.estimates, self.nonzero)
        ]
        return {
            "alpha": float(self.alpha),
            "kind": self.estimates[0].kind.name,
            "rule": self.rule,
            "best_lambda": float(self.best_lambda),
            "one_se_lambda": float(self.one_se_lambda),
            "chosen_lambda": float(self.chosen_lambda),
            "curve": curve,
        }


def tune_lambda(data: Dataset, alpha: float, plan: FoldPlan, kind="squared_error", rule: str = "one_se",
                n_lambda: int = 100, lambdas: Optional[Sequence[float]] = None,
                features: Optional[Sequence[int]] = None, standardize: bool = True,
                threshold: float = 0.5, n_jobs: int = 1) -> LambdaTuning:
    """
    Cross-validated elastic-net lambda over a descending grid, reusing the same
    splits for every lambda.

    rule "best" takes the best mean score; "one_se" takes the largest lambda
    whose score lies within the score-difference standard error of the best.
    """
    from core import selection

    if rule in ("best", "best_score"):
        rule = "best"
    elif rule not in ("one_se", "ose_diff"):
        raise ConfigError(f"unknown lambda rule '{rule}' (expected best or one_se)")
    else:
        rule = "one_se"
    objective = "logistic" if data.task == "classification" else "linear"
    features = tuple(range(data.p)) if features is None else tuple(features)
    if lambdas is None:
        grid = lambda_path(data, alpha, n_lambda, objective, features, standardize)
    else:
        grid = np.sort(np.asarray(lambdas, dtype=float))[::-1]

    specs = [
        ModelSpec(
            "elastic_net",
            features,
            {"alpha": float(alpha), "lambda": float(lam), "objective": objective, "standardize": standardize},
            complexity_rank=i,
            name=f"lambda[{i}]={lam:.6g}",
        )
        for i, lam in enumerate(grid)
    ]
    estimates = tuple(estimate(s, data, plan, kind, threshold=threshold, n_jobs=n_jobs) for s in specs)
    nonzero = np.array([fit_model(s, data).extras["nonzero"] for s in specs])

    table = selection.ScoreTable.from_estimates(estimates, [s.complexity_rank for s in specs])
    best = selection.select(table, "best_score")
    one_se = selection.select(table, "ose_diff")
    position = {s.model_id: i for i, s in enumerate(specs)}
    logger.info("lambda tuning (alpha=%g): best=%.6g one_se=%.6g",
                alpha, grid[position[best.best_id]], grid[position[one_se.selected_id]])
    return LambdaTuning(
        alpha=float(alpha),
        lambdas=grid,
        estimates=estimates,
        nonzero=nonzero,
        best_lambda=float(grid[position[best.best_id]]),
        one_se_lambda=float(grid[position[one_se.selected_id]]),
        rule=rule,
        selection=one_se,
    )
