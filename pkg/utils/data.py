# ---------------------- utils/data.py ----------------------
# Dataset container and CSV ingestion
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.errors import DataError

logger = logging.getLogger(__name__)

TASKS = ("regression", "classification")


def _frozen(arr, dtype=None):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Immutable design matrix plus response and optional group/strata/coordinate columns.

    Row i of every array refers to row i of the source file. Arrays are made
    read-only on construction so a Dataset can be shared across fold workers.
    """

    features: np.ndarray
    response: np.ndarray
    task: str = "regression"
    feature_names: Tuple[str, ...] = ()
    groups: Optional[np.ndarray] = None
    strata: Optional[np.ndarray] = None
    coords: Optional[np.ndarray] = None
    class_labels: Optional[Tuple] = None
    index: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.ndim != 2:
            raise DataError(f"features must be a matrix, got {features.ndim} dimensions")
        n, p = features.shape
        response = np.asarray(self.response, dtype=float).ravel()
        if self.task not in TASKS:
            raise DataError(f"unknown task '{self.task}' (expected one of {TASKS})")
        if response.shape[0] != n:
            raise DataError(f"response has length {response.shape[0]}, expected {n}")
        if not np.all(np.isfinite(features)) or not np.all(np.isfinite(response)):
            raise DataError("features and response must not contain missing or non-finite values")
        if self.task == "classification" and not np.all(np.isin(response, (0.0, 1.0))):
            raise DataError("classification responses must be coded 0/1")

        names = tuple(self.feature_names) if self.feature_names else tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise DataError(f"feature_names has {len(names)} entries, expected {p}")

        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "response", _frozen(response))
        object.__setattr__(self, "feature_names", names)
        for attr in ("groups", "strata"):
            col = getattr(self, attr)
            if col is not None:
                col = np.asarray(col)
                if col.shape != (n,):
                    raise DataError(f"{attr} has shape {col.shape}, expected ({n},)")
                object.__setattr__(self, attr, _frozen(col))
        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=float)
            if coords.ndim == 1:
                coords = coords.reshape(-1, 1)
            if coords.shape[0] != n:
                raise DataError(f"coords has {coords.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(coords)):
                raise DataError("coords must not contain missing values")
            object.__setattr__(self, "coords", _frozen(coords))
        index = np.arange(n) if self.index is None else np.asarray(self.index, dtype=int)
        object.__setattr__(self, "index", _frozen(index))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        """Row subset; ``index`` keeps the original row numbers."""
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            features=self.features[idx],
            response=self.response[idx],
            task=self.task,
            feature_names=self.feature_names,
            groups=None if self.groups is None else self.groups[idx],
            strata=None if self.strata is None else self.strata[idx],
            coords=None if self.coords is None else self.coords[idx],
            class_labels=self.class_labels,
            index=self.index[idx],
        )

    def column(self, name: str) -> np.ndarray:
        try:
            return self.features[:, self.feature_names.index(name)]
        except ValueError:
            raise DataError(f"no feature named '{name}'; available: {list(self.feature_names)}") from None

    def design(self, included: Sequence[int], intercept: bool = True) -> np.ndarray:
        """Design matrix of the included feature columns, intercept first."""
        included = list(included)
        for j in included:
            if not 0 <= j < self.p:
                raise DataError(f"feature index {j} out of range for p={self.p}")
        cols = self.features[:, included]
        if intercept:
            cols = np.column_stack([np.ones(self.n), cols])
        return cols

    def equals(self, other: "Dataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.all(a == b))

        return (
            self.task == other.task
            and self.feature_names == other.feature_names
            and same(self.features, other.features)
            and same(self.response, other.response)
            and same(self.groups, other.groups)
            and same(self.strata, other.strata)
            and same(self.coords, other.coords)
        )


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping from a CSV file onto a Dataset."""

    response_column: str
    feature_columns: Tuple[str, ...] = ()
    group_column: Optional[str] = None
    strata_column: Optional[str] = None
    coord_columns: Tuple[str, ...] = ()
    task: str = "regression"

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        object.__setattr__(self, "coord_columns", tuple(self.coord_columns or ()))
        if self.task not in TASKS:
            raise DataError(f"unknown task '{self.task}' (expected one of {TASKS})")
        if self.response_column in self.feature_columns:
            raise DataError(f"response column '{self.response_column}' is also listed as a feature")
        named = [self.response_column, *self.feature_columns, *self.coord_columns]
        named += [c for c in (self.group_column, self.strata_column) if c]
        dupes = sorted({c for c in named if named.count(c) > 1})
        if dupes:
            raise DataError(f"schema names columns more than once: {dupes}")

    def all_columns(self):
        cols = [self.response_column, *self.feature_columns]
        cols += [c for c in (self.group_column, self.strata_column) if c]
        return cols + list(self.coord_columns)

    def to_dict(self):
        return {
            "response_column": self.response_column,
            "feature_columns": list(self.feature_columns),
            "group_column": self.group_column,
            "strata_column": self.strata_column,
            "coord_columns": list(self.coord_columns),
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            response_column=d["response_column"],
            feature_columns=tuple(d.get("feature_columns") or ()),
            group_column=d.get("group_column"),
            strata_column=d.get("strata_column"),
            coord_columns=tuple(d.get("coord_columns") or ()),
            task=d.get("task", "regression"),
        )


def _numeric_column(frame, col):
    values = pd.to_numeric(frame[col], errors="coerce")
    bad = values.isna() & frame[col].notna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"non-numeric value {frame[col].iloc[row]!r} at row {row}, column {col}")
    return values.to_numpy(dtype=float)


def _encode_binary(values: pd.Series, col: str):
    levels = pd.unique(values)
    if len(levels) != 2:
        raise DataError(f"classification response column {col} must hold exactly two distinct values, found {len(levels)}")
    if pd.api.types.is_numeric_dtype(values):
        ordered = sorted(levels)
    else:
        ordered = sorted(levels, key=str)
    codes = (values.to_numpy() == ordered[1]).astype(float)
    return codes, tuple(v.item() if hasattr(v, "item") else v for v in ordered)


def load_csv(path: Union[str, Path], schema: CsvSchema) -> Dataset:
    """
    Load a CSV file into a Dataset according to ``schema``.

    Parameters:
    - path: UTF-8 CSV with a header row
    - schema: CsvSchema naming the response, features and optional columns

    Returns:
    - Dataset with row order preserved. Non-numeric feature columns are one-hot
      encoded with the first level dropped.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")

    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    missing = [c for c in schema.all_columns() if c not in frame.columns]
    if missing:
        raise DataError(f"missing column(s) {missing}; available columns: {list(frame.columns)}")

    feature_columns = list(schema.feature_columns)
    if not feature_columns:
        taken = set(schema.all_columns())
        feature_columns = [c for c in frame.columns if c not in taken]

    used = frame[[schema.response_column, *feature_columns, *schema.coord_columns]
                 + [c for c in (schema.group_column, schema.strata_column) if c]]
    na = used.isna().to_numpy()
    if na.any():
        r, c = np.argwhere(na)[0]
        raise DataError(f"missing value at row {int(r)}, column {used.columns[c]}")

    blocks, names = [], []
    for col in feature_columns:
        series = frame[col]
        if pd.api.types.is_numeric_dtype(series) or pd.api.types.is_bool_dtype(series):
            blocks.append(series.to_numpy(dtype=float).reshape(-1, 1))
            names.append(col)
        else:
            dummies = pd.get_dummies(series.astype(str), prefix=col, prefix_sep="=", drop_first=True, dtype=float)
            logger.debug("one-hot encoded %s into %d columns", col, dummies.shape[1])
            blocks.append(dummies.to_numpy())
            names.extend(dummies.columns)
    features = np.hstack(blocks) if blocks else np.empty((len(frame), 0))

    class_labels = None
    if schema.task == "classification":
        response, class_labels = _encode_binary(frame[schema.response_column], schema.response_column)
    else:
        response = _numeric_column(frame, schema.response_column)

    coords = None
    if schema.coord_columns:
        coords = np.column_stack([_numeric_column(frame, c) for c in schema.coord_columns])

    dataset = Dataset(
        features=features,
        response=response,
        task=schema.task,
        feature_names=tuple(names),
        groups=None if not schema.group_column else frame[schema.group_column].astype(str).to_numpy(),
        strata=None if not schema.strata_column else frame[schema.strata_column].astype(str).to_numpy(),
        coords=coords,
        class_labels=class_labels,
    )
    logger.info("loaded %s: n=%d, p=%d, task=%s", path, dataset.n, dataset.p, dataset.task)
    return dataset


def write_csv(dataset: Dataset, path: Union[str, Path], response_column: str = "y") -> CsvSchema:
    """Write ``dataset`` to CSV and return the schema that reloads it exactly."""
    path = Path(path)
    frame = pd.DataFrame(np.asarray(dataset.features), columns=list(dataset.feature_names))
    if response_column in frame.columns:
        raise DataError(f"response column name '{response_column}' collides with a feature name")
    if dataset.task == "classification" and dataset.class_labels is not None:
        labels = np.asarray(dataset.class_labels, dtype=object)
        frame.insert(0, response_column, labels[dataset.response.astype(int)])
    else:
        frame.insert(0, response_column, dataset.response)
    group_column = strata_column = None
    if dataset.groups is not None:
        group_column = "group"
        frame[group_column] = dataset.groups
    if dataset.strata is not None:
        strata_column = "stratum"
        frame[strata_column] = dataset.strata
    coord_columns = ()
    if dataset.coords is not None:
        coord_columns = tuple(f"coord{k + 1}" for k in range(dataset.coords.shape[1]))
        for k, name in enumerate(coord_columns):
            frame[name] = dataset.coords[:, k]
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8")
    return CsvSchema(
        response_column=response_column,
        feature_columns=tuple(dataset.feature_names),
        group_column=group_column,
        strata_column=strata_column,
        coord_columns=coord_columns,
        task=dataset.task,
    )
