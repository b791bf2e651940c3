# ---------------------- core/splitters.py ----------------------
# Train/test splitting plans: K-fold, repeated, stratified, LOO, leave-d-out, LOGO, blocked, nested
from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from core.errors import PlanError

logger = logging.getLogger(__name__)

# Scheme names accepted by make_plan, the CLI and run configs
SCHEMES = ("kfold", "repeated-kfold", "loo", "stratified-kfold", "leave-d-out", "logo", "blocked")


def _rng(seed: int) -> np.random.Generator:
    """Counter-based generator so plan r depends only on (seed, r)."""
    if seed < 0:
        raise PlanError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True, eq=False)
class Split:
    train_idx: np.ndarray
    test_idx: np.ndarray
    repetition: int = 0

    def __post_init__(self):
        train = np.asarray(self.train_idx, dtype=np.int64)
        test = np.asarray(self.test_idx, dtype=np.int64)
        train.setflags(write=False)
        test.setflags(write=False)
        object.__setattr__(self, "train_idx", train)
        object.__setattr__(self, "test_idx", test)

    def validate(self, n: int):
        if self.test_idx.size == 0:
            raise PlanError("split has an empty test set")
        if self.train_idx.size == 0:
            raise PlanError("split has an empty training set")
        both = np.concatenate([self.train_idx, self.test_idx])
        if both.min() < 0 or both.max() >= n:
            raise PlanError(f"split indices fall outside [0, {n})")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise PlanError("split train and test sets overlap")

    def to_dict(self):
        return {
            "train": self.train_idx.tolist(),
            "test": self.test_idx.tolist(),
            "repetition": int(self.repetition),
        }

    def __eq__(self, other):
        return (
            isinstance(other, Split)
            and self.repetition == other.repetition
            and np.array_equal(self.train_idx, other.train_idx)
            and np.array_equal(self.test_idx, other.test_idx)
        )

    __hash__ = None


@dataclass(frozen=True)
class FoldPlan:
    """
    Ordered list of train/test splits produced by one splitting scheme.

    ``params`` records the scheme parameters (K, R, d, h, ...) so the plan
    serialises to a self-describing JSON document.
    """

    splits: Tuple[Split, ...]
    scheme: str
    n: int
    seed: int = 0
    params: Dict = field(default_factory=dict)
    dropped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "splits", tuple(self.splits))
        if not self.splits:
            raise PlanError("plan has no splits")
        for s in self.splits:
            s.validate(self.n)

    def __len__(self):
        return len(self.splits)

    @property
    def repetition_ids(self) -> np.ndarray:
        return np.array([s.repetition for s in self.splits], dtype=int)

    @property
    def n_repetitions(self) -> int:
        return len(set(self.repetition_ids.tolist()))

    def repetitions(self) -> Dict[int, List[int]]:
        """Map repetition id -> positions of its splits, in plan order."""
        out: Dict[int, List[int]] = {}
        for k, s in enumerate(self.splits):
            out.setdefault(s.repetition, []).append(k)
        return out

    @property
    def is_partition(self) -> bool:
        for positions in self.repetitions().values():
            tests = np.concatenate([self.splits[k].test_idx for k in positions])
            if tests.size != self.n or not np.array_equal(np.sort(tests), np.arange(self.n)):
                return False
        return True

    def to_dict(self):
        return {
            "scheme": self.scheme,
            "n": int(self.n),
            "seed": int(self.seed),
            "params": dict(self.params),
            "dropped": int(self.dropped),
            "splits": [s.to_dict() for s in self.splits],
        }

    @classmethod
    def from_dict(cls, d):
        splits = [Split(s["train"], s["test"], s.get("repetition", 0)) for s in d["splits"]]
        return cls(
            splits=tuple(splits),
            scheme=d["scheme"],
            n=int(d["n"]),
            seed=int(d.get("seed", 0)),
            params=dict(d.get("params", {})),
            dropped=int(d.get("dropped", 0)),
        )

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def same_splits(self, other: "FoldPlan") -> bool:
        return len(self) == len(other) and all(a == b for a, b in zip(self.splits, other.splits))


def _check_k(n: int, K: int):
    if K < 2 or K > n:
        raise PlanError(f"K must satisfy 2 <= K <= n (got K={K}, n={n})")


def _splits_from_assignment(fold_of: np.ndarray, K: int, repetition: int = 0) -> List[Split]:
    everything = np.arange(fold_of.size)
    return [
        Split(everything[fold_of != k], everything[fold_of == k], repetition)
        for k in range(K)
    ]


def _deal(n: int, K: int, rng: np.random.Generator) -> np.ndarray:
    # shuffled round-robin: fold sizes differ by at most one
    fold_of = np.empty(n, dtype=int)
    fold_of[rng.permutation(n)] = np.arange(n) % K
    return fold_of


def make_kfold(n: int, K: int, seed: int = 0) -> FoldPlan:
    """K-fold plan: a random permutation dealt round-robin into K folds."""
    _check_k(n, K)
    fold_of = _deal(n, K, _rng(seed))
    return FoldPlan(tuple(_splits_from_assignment(fold_of, K)), "kfold", n, seed, {"K": K})


def make_loo(n: int) -> FoldPlan:
    if n < 2:
        raise PlanError(f"leave-one-out needs n >= 2 (got {n})")
    everything = np.arange(n)
    splits = tuple(Split(np.delete(everything, i), [i]) for i in range(n))
    return FoldPlan(splits, "loo", n, 0, {})


def make_repeated_kfold(n: int, K: int, R: int, seed: int = 0) -> FoldPlan:
    """R independent K-fold plans; repetition r uses seed + r."""
    _check_k(n, K)
    if R < 1:
        raise PlanError(f"R must be >= 1 (got {R})")
    splits: List[Split] = []
    for r in range(R):
        splits.extend(_splits_from_assignment(_deal(n, K, _rng(seed + r)), K, r))
    return FoldPlan(tuple(splits), "repeated-kfold", n, seed, {"K": K, "R": R})


def make_stratified_kfold(n: int, K: int, strata: Sequence, seed: int = 0) -> FoldPlan:
    """
    Stratified K-fold: each stratum is shuffled and dealt round-robin.

    Dealing for a stratum starts where the previous stratum stopped, so both
    per-level counts and overall fold sizes differ by at most one across folds.
    """
    strata = np.asarray(strata)
    if strata.shape != (n,):
        raise PlanError(f"strata has length {strata.size}, expected {n}")
    if K > n:
        raise PlanError(f"K must not exceed n (got K={K}, n={n})")
    _check_k(n, K)
    rng = _rng(seed)
    fold_of = np.empty(n, dtype=int)
    offset = 0
    for level in pd.unique(strata):
        members = rng.permutation(np.flatnonzero(strata == level))
        fold_of[members] = (offset + np.arange(members.size)) % K
        offset = (offset + members.size) % K
    return FoldPlan(tuple(_splits_from_assignment(fold_of, K)), "stratified-kfold", n, seed, {"K": K})


def make_leave_d_out(n: int, d: int, iterations: int, seed: int = 0) -> FoldPlan:
    """
    Repeated removal of d random test points.

    Draws are independent across iterations, so the same test subset may occur
    more than once. Each iteration is recorded as its own repetition.
    """
    if d < 1 or d >= n:
        raise PlanError(f"d must satisfy 1 <= d <= n-1 (got d={d}, n={n})")
    if iterations < 1:
        raise PlanError(f"iterations must be >= 1 (got {iterations})")
    rng = _rng(seed)
    everything = np.arange(n)
    splits = []
    for it in range(iterations):
        test = np.sort(rng.choice(n, size=d, replace=False))
        mask = np.ones(n, dtype=bool)
        mask[test] = False
        splits.append(Split(everything[mask], test, it))
    return FoldPlan(tuple(splits), "leave-d-out", n, seed, {"d": d, "iterations": iterations})


def consistent_d(n: int) -> int:
    """Test-set size n(1 - 1/(ln n - 1)), rounded up, for consistent leave-d-out selection."""
    if n < 8:
        raise PlanError(f"consistent d needs n >= 8 (got {n})")
    return int(math.ceil(n * (1.0 - 1.0 / (math.log(n) - 1.0))))


def make_logo(groups: Sequence) -> FoldPlan:
    """Leave-one-group-out: one split per group, in order of first occurrence."""
    groups = np.asarray(groups)
    levels = pd.unique(groups)
    if levels.size < 2:
        raise PlanError(f"leave-one-group-out needs at least 2 groups (got {levels.size})")
    n = groups.size
    everything = np.arange(n)
    splits = tuple(Split(everything[groups != g], everything[groups == g]) for g in levels)
    return FoldPlan(splits, "logo", n, 0, {"groups": int(levels.size)})


def make_blocked(coords, base: FoldPlan, h: float) -> FoldPlan:
    """
    Blocked plan: drop from every training set the points within Euclidean
    distance h of the nearest test point. Test sets are unchanged.

    Splits left with no training points are dropped and counted in ``dropped``.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords.reshape(-1, 1)
    if coords.shape[0] != base.n:
        raise PlanError(f"coords has {coords.shape[0]} rows, plan expects n={base.n}")
    if h < 0:
        raise PlanError(f"h must be non-negative (got {h})")

    kept, dropped = [], 0
    for s in base.splits:
        dist, _ = cKDTree(coords[s.test_idx]).query(coords[s.train_idx], k=1)
        train = s.train_idx[dist > h]
        if train.size == 0:
            dropped += 1
            continue
        kept.append(Split(train, s.test_idx, s.repetition))

    if not kept:
        raise PlanError(f"empty training sets: every split lost its training data at h={h}")
    if dropped:
        msg = f"blocked plan dropped {dropped} of {len(base)} splits with empty training sets"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    params = {"h": float(h), "base": base.scheme, **base.params}
    return FoldPlan(tuple(kept), "blocked", base.n, base.seed, params, dropped)


@dataclass(frozen=True)
class NestedPlan:
    """
    Outer plan plus one inner K-fold plan per outer split.

    Inner indices are positions into the outer split's training set;
    ``original_indices`` maps them back to dataset rows.
    """

    outer: FoldPlan
    inner: Tuple[FoldPlan, ...]
    inner_K: int
    seed: int = 0

    def original_indices(self, outer_k: int, positions) -> np.ndarray:
        return self.outer.splits[outer_k].train_idx[np.asarray(positions, dtype=int)]

    def inner_original(self, outer_k: int) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Inner splits of outer split ``outer_k`` in original row numbers."""
        train = self.outer.splits[outer_k].train_idx
        return [(train[s.train_idx], train[s.test_idx]) for s in self.inner[outer_k].splits]


def make_nested(outer: FoldPlan, inner_K: int, seed: int = 0) -> NestedPlan:
    if inner_K < 2:
        raise PlanError(f"inner_K must be >= 2 (got {inner_K})")
    inner = []
    for k, s in enumerate(outer.splits):
        if inner_K > s.train_idx.size:
            raise PlanError(
                f"inner_K={inner_K} exceeds the training size {s.train_idx.size} of outer split {k}"
            )
        inner.append(make_kfold(s.train_idx.size, inner_K, seed + k))
    return NestedPlan(outer, tuple(inner), inner_K, seed)


def make_plan(scheme: str, n: int, seed: int = 0, K: int = 10, R: int = 1, d: Optional[int] = None,
              iterations: int = 100, groups=None, strata=None, coords=None, h: float = 0.0,
              base: str = "loo") -> FoldPlan:
    """Build a plan from a scheme name, the way the CLI and configs describe them."""
    if scheme == "kfold":
        return make_kfold(n, K, seed)
    if scheme == "repeated-kfold":
        return make_repeated_kfold(n, K, R, seed)
    if scheme == "loo":
        return make_loo(n)
    if scheme == "stratified-kfold":
        if strata is None:
            raise PlanError("stratified-kfold needs a strata column")
        return make_stratified_kfold(n, K, strata, seed)
    if scheme == "leave-d-out":
        return make_leave_d_out(n, consistent_d(n) if d is None else d, iterations, seed)
    if scheme == "logo":
        if groups is None:
            raise PlanError("logo needs a groups column")
        return make_logo(groups)
    if scheme == "blocked":
        if coords is None:
            raise PlanError("blocked needs coordinate columns")
        if base == "blocked":
            raise PlanError("blocked plans cannot wrap another blocked plan")
        inner = make_plan(base, n, seed, K=K, R=R, d=d, iterations=iterations, groups=groups, strata=strata)
        return make_blocked(coords, inner, h)
    raise PlanError(f"unknown scheme '{scheme}'; expected one of {list(SCHEMES)}")


@lru_cache(maxsize=64)
def loo_fingerprint(n: int) -> str:
    """``make_loo(n).fingerprint()`` without materialising the n x (n-1) plan."""
    digits = [str(j) for j in range(n)]
    h = hashlib.sha256()
    h.update(f'{{"dropped":0,"n":{n},"params":{{}},"scheme":"loo","seed":0,"splits":['.encode("utf-8"))
    for i in range(n):
        train = ",".join(digits[:i] + digits[i + 1:])
        prefix = "," if i else ""
        h.update(f'{prefix}{{"repetition":0,"test":[{i}],"train":[{train}]}}'.encode("utf-8"))
    h.update(b"]}")
    return h.hexdigest()[:16]
