# ---------------------- core/models.py ----------------------
# Model families behind one fit/predict contract: OLS, IRLS logistic, elastic net
from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import expit

from core.errors import (
    ConvergenceError,
    FitError,
    RankDeficiencyError,
    SeparationError,
)
from core.losses import PredictionBatch
from utils.data import Dataset

logger = logging.getLogger(__name__)

INTERCEPT = "(intercept)"


@dataclass(frozen=True)
class ModelSpec:
    """
    A candidate model: family, included feature columns and hyperparameters.

    complexity_rank orders candidates for the selection rules and defaults to
    the nominal parameter count.
    """

    family: str
    features: Tuple[int, ...] = ()
    hyperparameters: Mapping = field(default_factory=dict)
    complexity_rank: Optional[int] = None
    name: Optional[str] = None

    def __post_init__(self):
        feats = tuple(int(j) for j in self.features)
        if len(set(feats)) != len(feats):
            raise FitError(f"duplicate feature indices in {feats}")
        if any(j < 0 for j in feats):
            raise FitError(f"negative feature index in {feats}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "hyperparameters", dict(self.hyperparameters))
        if self.complexity_rank is None:
            object.__setattr__(self, "complexity_rank", self.param_count)

    @property
    def param_count(self) -> int:
        if self.family == "growth":
            return 3 + len(self.hyperparameters.get("sex_effect_on", ()))
        return len(self.features) + 1

    @property
    def model_id(self) -> str:
        if self.name:
            return self.name
        label = f"{self.family}[{','.join(str(j) for j in self.features)}]"
        if self.hyperparameters:
            hp = ",".join(f"{k}={_short(v)}" for k, v in sorted(self.hyperparameters.items()))
            label += "{" + hp + "}"
        return label

    def with_hyperparameters(self, **hp) -> "ModelSpec":
        merged = {**self.hyperparameters, **hp}
        return replace(self, hyperparameters=merged, name=None if self.name is None else self.name)

    def to_dict(self):
        return {
            "family": self.family,
            "features": list(self.features),
            "hyperparameters": {k: _plain(v) for k, v in self.hyperparameters.items()},
            "complexity_rank": int(self.complexity_rank),
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            family=d["family"],
            features=tuple(d.get("features", ())),
            hyperparameters=dict(d.get("hyperparameters", {})),
            complexity_rank=d.get("complexity_rank"),
            name=d.get("name"),
        )


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple, set, frozenset)):
        return "".join(sorted(str(x) for x in v)) or "0"
    return str(v)


def _plain(v):
    if isinstance(v, (set, frozenset, tuple)):
        return sorted(v) if isinstance(v, (set, frozenset)) else list(v)
    if isinstance(v, np.generic):
        return v.item()
    return v


@dataclass(frozen=True, eq=False)
class FittedModel:
    spec: ModelSpec
    coefficients: np.ndarray
    names: Tuple[str, ...] = ()
    training_sigma: Optional[float] = None
    hat_values: Optional[np.ndarray] = None
    n_iter: int = 0
    extras: Dict = field(default_factory=dict)

    def predict(self, data: Dataset) -> PredictionBatch:
        return FAMILIES[self.spec.family].predict(self, data)


@dataclass(frozen=True)
class ModelFamily:
    fit: Callable[[ModelSpec, Dataset], FittedModel]
    predict: Callable[[FittedModel, Dataset], PredictionBatch]


FAMILIES: Dict[str, ModelFamily] = {}


def register_family(name: str, fit, predict):
    """Extension point: register another model family under ``name``."""
    FAMILIES[name] = ModelFamily(fit, predict)


def fit_model(spec: ModelSpec, train: Dataset) -> FittedModel:
    try:
        family = FAMILIES[spec.family]
    except KeyError:
        raise FitError(f"unknown model family '{spec.family}'; registered: {sorted(FAMILIES)}") from None
    return family.fit(spec, train)


def _column_names(data: Dataset, included, intercept=True):
    names = [data.feature_names[j] for j in included]
    return tuple([INTERCEPT] + names) if intercept else tuple(names)


def _rank_revealing_qr(X: np.ndarray, names):
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        raise FitError("design matrix has no columns")
    tol = max(X.shape) * np.finfo(float).eps * diag[0]
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1] or X.shape[0] < X.shape[1]:
        raise RankDeficiencyError([names[k] for k in piv[rank:]] or list(names))
    return Q, R, piv


# ---- OLS ----
def fit_ols(train: Dataset, features: Optional[Sequence[int]] = None, spec: Optional[ModelSpec] = None) -> FittedModel:
    """
    Least squares via pivoted QR.

    hat_values are the diagonal of X(X'X)^-1 X' (row sums of squared Q);
    training_sigma is the maximum-likelihood sqrt(RSS / n).
    """
    if spec is None:
        spec = ModelSpec("ols", tuple(range(train.p)) if features is None else tuple(features))
    included = spec.features
    X = train.design(included)
    names = _column_names(train, included)
    Q, R, piv = _rank_revealing_qr(X, names)
    y = train.response
    coef = np.empty(X.shape[1])
    coef[piv] = linalg.solve_triangular(R, Q.T @ y)
    resid = y - X @ coef
    return FittedModel(
        spec=spec,
        coefficients=coef,
        names=names,
        training_sigma=float(np.sqrt(np.mean(resid**2))),
        hat_values=np.sum(Q**2, axis=1),
        extras={"rss": float(resid @ resid)},
    )


def _predict_linear(fitted: FittedModel, data: Dataset) -> PredictionBatch:
    mean = data.design(fitted.spec.features) @ fitted.coefficients
    return PredictionBatch(mean=mean, sigma=np.full(mean.shape, fitted.training_sigma))


# ---- IRLS logistic regression ----
def _bernoulli_loglik(X, y, beta):
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _require_binary(train: Dataset):
    if not np.all(np.isin(train.response, (0.0, 1.0))):
        raise FitError("logistic models need a binary 0/1 response")
    if np.unique(train.response).size < 2:
        raise FitError("logistic models need both classes in the training data")


def fit_logistic(train: Dataset, features: Optional[Sequence[int]] = None, max_iter: int = 100,
                 tol: float = 1e-8, spec: Optional[ModelSpec] = None) -> FittedModel:
    """
    Maximum-likelihood logistic regression by iteratively reweighted least squares.

    Each Newton step is halved until the log-likelihood does not decrease.
    Complete separation (perfect, saturated classification) or diverging
    coefficients raise SeparationError.
    """
    if spec is None:
        spec = ModelSpec("logistic", tuple(range(train.p)) if features is None else tuple(features))
    max_iter = int(spec.hyperparameters.get("max_iter", max_iter))
    tol = float(spec.hyperparameters.get("tol", tol))
    _require_binary(train)
    X = train.design(spec.features)
    names = _column_names(train, spec.features)
    _rank_revealing_qr(X, names)
    y = train.response

    beta = np.zeros(X.shape[1])
    ybar = y.mean()
    beta[0] = np.log(ybar / (1.0 - ybar))
    loglik = _bernoulli_loglik(X, y, beta)
    trace = [loglik]

    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        w = p * (1.0 - p)
        hessian = X.T @ (X * w[:, None])
        try:
            step = linalg.solve(hessian, X.T @ (y - p), assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SeparationError("information matrix became singular; the classes appear separable") from None

        t = 1.0
        while True:
            candidate = beta + t * step
            cand_ll = _bernoulli_loglik(X, y, candidate)
            if cand_ll >= loglik - 1e-12 * abs(loglik):
                break
            t *= 0.5
            if t < 1e-10:
                raise ConvergenceError("IRLS step halving", it)

        delta = np.max(np.abs(candidate - beta))
        beta, loglik = candidate, cand_ll
        trace.append(loglik)

        eta = X @ beta
        if np.all((eta > 0) == (y == 1)) and np.min(np.abs(eta)) > 15.0:
            raise SeparationError(f"complete separation detected after {it} iterations (coefficients diverge)")
        if np.max(np.abs(beta)) > 1e6:
            raise SeparationError(f"coefficients diverged after {it} iterations")
        if delta < tol:
            logger.debug("IRLS converged in %d iterations", it)
            return FittedModel(spec=spec, coefficients=beta, names=names, n_iter=it,
                               extras={"loglik": loglik, "loglik_trace": trace})

    raise ConvergenceError("IRLS", max_iter)


def _predict_logistic(fitted: FittedModel, data: Dataset) -> PredictionBatch:
    eta = data.design(fitted.spec.features) @ fitted.coefficients
    return PredictionBatch(prob=expit(eta))


# ---- Elastic net ----
@dataclass(frozen=True)
class ElasticNetConfig:
    """alpha mixes the L1 (alpha=1) and L2 (alpha=0) penalties; lam is the strength lambda."""

    alpha: float = 1.0
    lam: float = 0.0
    standardize: bool = True
    max_iter: int = 100000
    tol: float = 1e-10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise FitError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise FitError(f"lambda must be non-negative, got {self.lam}")
        if self.max_iter < 1 or self.tol <= 0:
            raise FitError("max_iter must be >= 1 and tol > 0")

    @classmethod
    def from_hyperparameters(cls, hp: Mapping) -> "ElasticNetConfig":
        return cls(
            alpha=float(hp.get("alpha", 1.0)),
            lam=float(hp.get("lambda", 0.0)),
            standardize=bool(hp.get("standardize", True)),
            max_iter=int(hp.get("max_iter", 100000)),
            tol=float(hp.get("tol", 1e-10)),
        )


def _standardize(X: np.ndarray, standardize: bool):
    mu = X.mean(axis=0)
    scale = X.std(axis=0) if standardize else np.ones(X.shape[1])
    scale = np.where(scale > 0, scale, 1.0)
    return mu, scale, (X - mu) / scale


def _soft_threshold(x, t):
    # an excess within rounding of t is zero, so lambda_max fits are empty
    excess = abs(x) - t
    if excess <= 1e-10 * t:
        return 0.0
    return np.sign(x) * excess


def _penalty(b, lam, alpha):
    return lam * (alpha * np.sum(np.abs(b)) + 0.5 * (1.0 - alpha) * float(b @ b))


def _coordinate_descent(Xs, z, w, lam, alpha, b0, b, max_sweeps, tol):
    """
    Cyclic coordinate descent for (w/2n)||z - b0 - Xs b||^2 + penalty.

    The intercept b0 is unpenalised. The objective is checked after every
    sweep and must never increase.
    """
    n = z.size
    xj2 = w * np.einsum("ij,ij->j", Xs, Xs) / n
    r = z - b0 - Xs @ b
    previous = 0.5 * w * float(r @ r) / n + _penalty(b, lam, alpha)
    for sweep in range(1, max_sweeps + 1):
        max_delta = 0.0
        for j in range(b.size):
            if xj2[j] == 0.0:
                continue
            old = b[j]
            rho = w * (Xs[:, j] @ r) / n + xj2[j] * old
            new = _soft_threshold(rho, lam * alpha) / (xj2[j] + lam * (1.0 - alpha))
            if new != old:
                r -= Xs[:, j] * (new - old)
                b[j] = new
                max_delta = max(max_delta, abs(new - old) * np.sqrt(xj2[j]))
        shift = r.mean()
        b0 += shift
        r -= shift
        current = 0.5 * w * float(r @ r) / n + _penalty(b, lam, alpha)
        if current > previous + 1e-12 * max(1.0, abs(previous)):
            raise FitError(f"coordinate descent objective increased at sweep {sweep}")
        previous = current
        if max_delta < tol and abs(shift) < tol:
            return b0, b, sweep
    raise ConvergenceError("coordinate descent", max_sweeps)


def _logistic_objective(Xs, y, b0, b, lam, alpha):
    eta = b0 + Xs @ b
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta)) + _penalty(b, lam, alpha)


def fit_elastic_net(train: Dataset, cfg: ElasticNetConfig, objective: str = "linear",
                    features: Optional[Sequence[int]] = None, spec: Optional[ModelSpec] = None) -> FittedModel:
    """
    Minimise f + lambda * (alpha ||b||_1 + (1 - alpha)/2 ||b||_2^2) by coordinate descent.

    f is ||r||^2 / (2n) for the linear objective and the mean negative
    log-likelihood for the logistic one. The logistic fit majorises the
    log-likelihood with curvature 1/4 and solves one penalised least-squares
    problem per outer step, so its objective decreases monotonically.
    Coefficients are returned on the original feature scale.
    """
    if objective not in ("linear", "logistic"):
        raise FitError(f"unknown elastic-net objective '{objective}'")
    if spec is None:
        spec = ModelSpec(
            "elastic_net",
            tuple(range(train.p)) if features is None else tuple(features),
            {"alpha": cfg.alpha, "lambda": cfg.lam, "objective": objective, "standardize": cfg.standardize},
        )
    included = list(spec.features)
    X = train.features[:, included]
    y = train.response
    mu, scale, Xs = _standardize(X, cfg.standardize)
    b = np.zeros(len(included))

    if objective == "linear":
        b0, b, sweeps = _coordinate_descent(Xs, y, 1.0, cfg.lam, cfg.alpha, float(y.mean()), b,
                                            cfg.max_iter, cfg.tol)
        outer_steps = 1
    else:
        _require_binary(train)
        ybar = y.mean()
        b0 = float(np.log(ybar / (1.0 - ybar)))
        previous = _logistic_objective(Xs, y, b0, b, cfg.lam, cfg.alpha)
        sweeps = 0
        for outer_steps in range(1, cfg.max_iter + 1):
            eta = b0 + Xs @ b
            z = eta + 4.0 * (y - expit(eta))
            old_b0, old_b = b0, b.copy()
            b0, b, used = _coordinate_descent(Xs, z, 0.25, cfg.lam, cfg.alpha, b0, b, cfg.max_iter, cfg.tol)
            sweeps += used
            current = _logistic_objective(Xs, y, b0, b, cfg.lam, cfg.alpha)
            if current > previous + 1e-12 * max(1.0, abs(previous)):
                raise FitError(f"majorisation step increased the objective at step {outer_steps}")
            previous = current
            if max(abs(b0 - old_b0), float(np.max(np.abs(b - old_b), initial=0.0))) < cfg.tol:
                break
        else:
            raise ConvergenceError("elastic-net majorisation", cfg.max_iter)

    beta = b / scale
    intercept = b0 - float(mu @ beta)
    coef = np.concatenate([[intercept], beta])
    sigma = None
    if objective == "linear":
        resid = y - train.design(included) @ coef
        sigma = float(np.sqrt(np.mean(resid**2)))
    logger.debug("elastic net (lambda=%g, alpha=%g) converged: %d sweeps, %d outer steps",
                 cfg.lam, cfg.alpha, sweeps, outer_steps)
    return FittedModel(
        spec=spec,
        coefficients=coef,
        names=_column_names(train, included),
        training_sigma=sigma,
        n_iter=sweeps,
        extras={"objective": objective, "standardized_coefficients": b.copy(), "nonzero": int(np.sum(b != 0))},
    )


def _predict_elastic_net(fitted: FittedModel, data: Dataset) -> PredictionBatch:
    eta = data.design(fitted.spec.features) @ fitted.coefficients
    if fitted.extras.get("objective") == "logistic":
        return PredictionBatch(prob=expit(eta))
    return PredictionBatch(mean=eta, sigma=np.full(eta.shape, fitted.training_sigma))


def lambda_path(train: Dataset, alpha: float, n_lambda: int = 100, objective: str = "linear",
                features: Optional[Sequence[int]] = None, standardize: bool = True,
                ratio: float = 1e-4) -> np.ndarray:
    """
    Descending geometric lambda grid from lambda_max to lambda_max * ratio.

    lambda_max = max_j |x_j' r0| / (n alpha), the smallest lambda at which the
    lasso sets every penalised coefficient to zero. r0 is the centred
    response (linear) or y - mean(y) (logistic null model).
    """
    if n_lambda < 2:
        raise FitError(f"n_lambda must be >= 2 (got {n_lambda})")
    if alpha == 0:
        msg = "alpha=0 has no finite lambda_max; using alpha=0.001 for the grid"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        alpha = 0.001
    included = list(range(train.p)) if features is None else list(features)
    _, _, Xs = _standardize(train.features[:, included], standardize)
    y = train.response
    r0 = y - y.mean()
    n = y.size
    top = max(abs(Xs[:, j] @ r0) for j in range(Xs.shape[1]))
    lam_max = top / (n * alpha)
    if lam_max <= 0:
        raise FitError("response is constant; lambda path is undefined")
    return lam_max * np.geomspace(1.0, ratio, n_lambda)


def _fit_elastic_net_spec(spec: ModelSpec, train: Dataset) -> FittedModel:
    cfg = ElasticNetConfig.from_hyperparameters(spec.hyperparameters)
    return fit_elastic_net(train, cfg, spec.hyperparameters.get("objective", "linear"), spec=spec)


register_family("ols", lambda spec, train: fit_ols(train, spec=spec), _predict_linear)
register_family("logistic", lambda spec, train: fit_logistic(train, spec=spec), _predict_logistic)
register_family("elastic_net", _fit_elastic_net_spec, _predict_elastic_net)


# ---- Candidate generation ----
def all_subsets_specs(family: str, features: Sequence[int], max_size: Optional[int] = None,
                      hyperparameters: Optional[Mapping] = None) -> List[ModelSpec]:
    """Every subset of ``features`` (the empty model included), smallest first."""
    features = list(features)
    top = len(features) if max_size is None else min(max_size, len(features))
    return [
        ModelSpec(family, combo, hyperparameters or {})
        for size in range(top + 1)
        for combo in itertools.combinations(features, size)
    ]


def nested_specs(family: str, features: Sequence[int], hyperparameters: Optional[Mapping] = None) -> List[ModelSpec]:
    """Nested candidates using the first k features, k = 0..len(features)."""
    features = list(features)
    return [ModelSpec(family, tuple(features[:k]), hyperparameters or {}) for k in range(len(features) + 1)]


import core.growth  # noqa: E402,F401  (registers the growth family)
