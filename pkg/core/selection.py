# ---------------------- core/selection.py ----------------------
# Score tables and calibrated model selection (best score, one-standard-error rules)
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.engine import ScoreEstimate, estimate
from core.errors import FitError, SelectionError, SplitFitError
from core.losses import get_kind
from core.models import ModelSpec
from core.splitters import FoldPlan
from utils.data import Dataset

logger = logging.getLogger(__name__)

RULES = ("best_score", "ose_modified", "ose_diff", "ose_original")
RULE_ALIASES = {
    "best": "best_score",
    "ose-mod": "ose_modified",
    "ose-diff": "ose_diff",
    "ose-orig": "ose_original",
}

# Below this many data the standard errors behind the OSE rules are unreliable
SMALL_SAMPLE_N = 100
# Total log-score differences below this are within noise
SMALL_LOG_SCORE_DIFF = 4.0
LOG_SCORE_KINDS = ("gaussian_log_density", "log_loss")


@dataclass(frozen=True, eq=False)
class TableEntry:
    model_id: str
    estimate: ScoreEstimate
    complexity_rank: int


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Estimates of several models on one plan with one kind."""

    entries: Tuple[TableEntry, ...]
    n: Optional[int] = None

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise SelectionError("score table is empty")
        ids = [e.model_id for e in entries]
        if len(set(ids)) != len(ids):
            raise SelectionError(f"duplicate model ids in score table: {ids}")
        first = entries[0].estimate
        for e in entries[1:]:
            if e.estimate.kind.name != first.kind.name:
                raise SelectionError(
                    f"model {e.model_id} was scored with {e.estimate.kind.name}, expected {first.kind.name}"
                )
            if e.estimate.plan_fingerprint != first.plan_fingerprint:
                raise SelectionError(f"model {e.model_id} was scored on a different plan")

    @classmethod
    def from_estimates(cls, estimates: Sequence[ScoreEstimate], complexity_ranks: Sequence[int],
                       n: Optional[int] = None) -> "ScoreTable":
        if len(estimates) != len(complexity_ranks):
            raise SelectionError("need one complexity rank per estimate")
        return cls(
            tuple(TableEntry(e.model_id, e, int(r)) for e, r in zip(estimates, complexity_ranks)),
            n,
        )

    def __len__(self):
        return len(self.entries)

    @property
    def kind(self):
        return self.entries[0].estimate.kind

    @property
    def orientation(self) -> str:
        return self.kind.orientation

    @property
    def plan_fingerprint(self) -> str:
        return self.entries[0].estimate.plan_fingerprint

    @property
    def ids(self) -> List[str]:
        return [e.model_id for e in self.entries]

    @property
    def means(self) -> np.ndarray:
        return np.array([e.estimate.mean for e in self.entries])

    @property
    def utilities(self) -> np.ndarray:
        return np.array([e.estimate.utility for e in self.entries])

    @property
    def ses(self) -> np.ndarray:
        return np.array([e.estimate.se for e in self.entries])

    @property
    def ranks(self) -> np.ndarray:
        return np.array([e.complexity_rank for e in self.entries])

    @property
    def paired(self) -> bool:
        vectors = [e.estimate.paired_vector() for e in self.entries]
        size = vectors[0].size
        if size < 2 or any(v.size != size for v in vectors):
            return False
        methods = {e.estimate.se_method for e in self.entries}
        if len(methods) != 1:
            return False
        indexes = [e.estimate.pointwise.index for e in self.entries if e.estimate.pointwise is not None]
        return all(np.array_equal(indexes[0], ix) for ix in indexes[1:])

    def vectors(self) -> np.ndarray:
        if not self.paired:
            raise SelectionError(
                "score table is not paired: models need aligned pointwise or per-repetition vectors "
                "of equal length (at least 2) from the same plan"
            )
        return np.vstack([e.estimate.paired_vector() for e in self.entries])

    def entry(self, model_id: str) -> TableEntry:
        for e in self.entries:
            if e.model_id == model_id:
                return e
        raise SelectionError(f"no model '{model_id}' in score table")


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; a zero-variance vector gives 1 if the vectors are identical, else 0."""
    if np.array_equal(a, b):
        return 1.0
    if np.std(a) == 0.0 or np.std(b) == 0.0:
        return 0.0
    return float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0))


def best_index(table: ScoreTable) -> int:
    """Position of the best mean score; the first entry wins ties."""
    return int(np.argmax(table.utilities))


def correlation_with_best(table: ScoreTable) -> np.ndarray:
    vectors = table.vectors()
    best = vectors[best_index(table)]
    return np.array([_pearson(best, v) for v in vectors])


def correlation_matrix(table: ScoreTable) -> np.ndarray:
    vectors = table.vectors()
    M = len(vectors)
    out = np.eye(M)
    for i in range(M):
        for j in range(i + 1, M):
            out[i, j] = out[j, i] = _pearson(vectors[i], vectors[j])
    return out


def sigma_adj(table: ScoreTable) -> np.ndarray:
    """sigma_best * sqrt(1 - rho_best,m)."""
    rho = correlation_with_best(table)
    sigma_best = table.ses[best_index(table)]
    return sigma_best * np.sqrt(np.clip(1.0 - rho, 0.0, None))


def sigma_diff(table: ScoreTable) -> np.ndarray:
    """Standard error of the score difference to the best model."""
    rho = correlation_with_best(table)
    se = table.ses
    sb = se[best_index(table)]
    return np.sqrt(np.clip(se**2 + sb**2 - 2.0 * rho * se * sb, 0.0, None))


@dataclass(frozen=True)
class ModelRow:
    id: str
    mean: float
    se: float
    utility: float
    delta: float
    complexity: int
    rho: Optional[float] = None
    sigma_adj: Optional[float] = None
    sigma_diff: Optional[float] = None

    def to_dict(self):
        return {
            "id": self.id,
            "mean": self.mean,
            "se": self.se,
            "utility": self.utility,
            "delta": self.delta,
            "complexity": self.complexity,
            "rho": self.rho,
            "sigma_adj": self.sigma_adj,
            "sigma_diff": self.sigma_diff,
        }


@dataclass(frozen=True, eq=False)
class SelectionResult:
    """
    Outcome of one selection rule over a score table.

    delta is each model's mean minus the best mean, in the native orientation.
    """

    rule: str
    best_id: str
    selected_id: str
    models: Tuple[ModelRow, ...]
    kind: str
    orientation: str
    plan_fingerprint: str
    correlation: Optional[np.ndarray] = None
    small_sample_warning: bool = False
    tie_break_applied: bool = False
    notes: Tuple[str, ...] = field(default_factory=tuple)

    def row(self, model_id: str) -> ModelRow:
        for r in self.models:
            if r.id == model_id:
                return r
        raise SelectionError(f"no model '{model_id}' in selection result")

    @property
    def sigma_adj(self) -> Dict[str, Optional[float]]:
        return {r.id: r.sigma_adj for r in self.models}

    @property
    def sigma_diff(self) -> Dict[str, Optional[float]]:
        return {r.id: r.sigma_diff for r in self.models}

    @property
    def deltas(self) -> Dict[str, float]:
        return {r.id: r.delta for r in self.models}

    def to_dict(self):
        return {
            "rule": self.rule,
            "best": self.best_id,
            "selected": self.selected_id,
            "kind": self.kind,
            "orientation": self.orientation,
            "plan_fingerprint": self.plan_fingerprint,
            "models": [r.to_dict() for r in self.models],
            "correlation": None if self.correlation is None else {
                "ids": [r.id for r in self.models],
                "matrix": self.correlation.tolist(),
            },
            "small_sample_warning": self.small_sample_warning,
            "tie_break_applied": self.tie_break_applied,
            "notes": list(self.notes),
        }


def normalize_rule(rule: str) -> str:
    rule = RULE_ALIASES.get(rule, rule).replace("-", "_")
    if rule not in RULES:
        raise SelectionError(f"unknown selection rule '{rule}'; expected one of {list(RULES)}")
    return rule


def _small_sample(table: ScoreTable, best: int) -> Tuple[bool, List[str]]:
    notes = []
    n = table.n
    if n is None:
        n = next((len(e.estimate.pointwise) for e in table.entries if e.estimate.pointwise is not None), None)
    if n is not None and n < SMALL_SAMPLE_N:
        notes.append(f"n={n} < {SMALL_SAMPLE_N}: standard errors may be unreliable")
    if n is not None and table.kind.name in LOG_SCORE_KINDS:
        means = table.means
        close = [
            table.ids[m] for m in range(len(table))
            if m != best and n * abs(means[m] - means[best]) < SMALL_LOG_SCORE_DIFF
        ]
        if close:
            notes.append(f"total log-score difference to the best is below {SMALL_LOG_SCORE_DIFF:g} for {close}")
    return bool(notes), notes


def select(table: ScoreTable, rule: str = "ose_modified") -> SelectionResult:
    """
    Apply a selection rule.

    best_score takes the best mean. The OSE rules take the least complex
    model, among those no more complex than the best, whose utility gap to
    the best is at most its threshold (sigma_adj, sigma_diff, or sigma_best
    for ose_original). Ties on complexity go to the better mean, then model id.
    """
    rule = normalize_rule(rule)
    best = best_index(table)
    utilities, means, ranks = table.utilities, table.means, table.ranks
    sigma_best = float(table.ses[best])

    rho = adj = diff = corr = None
    if table.paired:
        rho = correlation_with_best(table)
        adj = sigma_adj(table)
        diff = sigma_diff(table)
        corr = correlation_matrix(table)
    elif rule in ("ose_modified", "ose_diff"):
        table.vectors()  # raises: these thresholds need paired vectors

    tie_break = False
    selected = best
    if rule != "best_score":
        thresholds = {"ose_modified": adj, "ose_diff": diff}.get(rule)
        if thresholds is None:
            thresholds = np.full(len(table), sigma_best)
        gaps = utilities[best] - utilities
        eligible = [m for m in range(len(table)) if ranks[m] <= ranks[best] and gaps[m] <= thresholds[m]]
        least = min(ranks[m] for m in eligible)
        tied = [m for m in eligible if ranks[m] == least]
        tie_break = len(tied) > 1
        selected = min(tied, key=lambda m: (-utilities[m], table.ids[m]))
        if tie_break:
            logger.warning("%d models share complexity rank %d within the threshold; picked %s by mean then id",
                           len(tied), least, table.ids[selected])

    flag, notes = _small_sample(table, best)
    if flag:
        for note in notes:
            logger.warning(note)
    if tie_break:
        notes.append("tie on complexity rank broken by better mean, then model id")

    rows = tuple(
        ModelRow(
            id=e.model_id,
            mean=float(means[m]),
            se=float(e.estimate.se),
            utility=float(utilities[m]),
            delta=float(means[m] - means[best]),
            complexity=int(ranks[m]),
            rho=None if rho is None else float(rho[m]),
            sigma_adj=None if adj is None else float(adj[m]),
            sigma_diff=None if diff is None else float(diff[m]),
        )
        for m, e in enumerate(table.entries)
    )
    return SelectionResult(
        rule=rule,
        best_id=table.ids[best],
        selected_id=table.ids[selected],
        models=rows,
        kind=table.kind.name,
        orientation=table.orientation,
        plan_fingerprint=table.plan_fingerprint,
        correlation=corr,
        small_sample_warning=flag,
        tie_break_applied=tie_break,
        notes=tuple(notes),
    )


def best_per_complexity(table: ScoreTable) -> Dict[int, str]:
    """Best-scoring model id at each complexity rank."""
    out: Dict[int, Tuple[float, str]] = {}
    for e, u in zip(table.entries, table.utilities):
        current = out.get(e.complexity_rank)
        if current is None or u > current[0]:
            out[e.complexity_rank] = (u, e.model_id)
    return {rank: mid for rank, (_, mid) in sorted(out.items())}


def _unique_ids(models: Sequence[ModelSpec]) -> List[str]:
    seen: Dict[str, int] = {}
    ids = []
    for spec in models:
        mid = spec.model_id
        seen[mid] = seen.get(mid, 0) + 1
        ids.append(mid if seen[mid] == 1 else f"{mid}#{seen[mid]}")
    return ids


def score_table(models: Sequence[ModelSpec], data: Dataset, plan: FoldPlan, kind,
                want_bias_correction: bool = False, threshold: float = 0.5, n_jobs: int = 1) -> ScoreTable:
    """Score every model on the same plan; repeated model ids get a #k suffix."""
    if not models:
        raise SelectionError("no models to score")
    kind = get_kind(kind)
    entries = []
    for spec, mid in zip(models, _unique_ids(models)):
        try:
            est = estimate(spec, data, plan, kind, want_bias_correction, threshold, n_jobs)
        except SplitFitError:
            raise
        except FitError as exc:
            raise FitError(f"model {mid}: {exc}") from exc
        if mid != est.model_id:
            est = replace(est, model_id=mid)
        entries.append(TableEntry(mid, est, spec.complexity_rank))
        logger.debug("scored %s: %s=%.6g (se %.3g)", mid, kind.name, est.mean, est.se)
    return ScoreTable(tuple(entries), data.n)
