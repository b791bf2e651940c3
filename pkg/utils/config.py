# ---------------------- utils/config.py ----------------------
# Resolved run configuration: flags > JSON config file > CVSELECT_SEED > defaults
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

from core.errors import ConfigError, DataError
from core.models import ModelSpec
from core.splitters import SCHEMES
from utils.data import CsvSchema, Dataset, load_csv

logger = logging.getLogger(__name__)

SEED_ENV = "CVSELECT_SEED"
DEMO_PREFIX = "demo:"

# Fields that change how a run executes but never its results
EXECUTION_ONLY = ("parallel", "out")


@dataclass(frozen=True)
class RunConfig:
    """
    One CLI task. ``seed`` is always explicit once resolved; ``models`` holds
    ModelSpec dicts whose features may be column names or indices.
    """

    dataset: Optional[str] = None
    schema: Optional[Dict] = None
    models: List[Dict] = field(default_factory=list)
    scheme: str = "kfold"
    k: int = 10
    repeats: int = 1
    d: Optional[int] = None
    iterations: int = 100
    h: float = 0.0
    base: str = "loo"
    kind: str = "squared_error"
    rule: str = "ose_modified"
    threshold: float = 0.5
    bias_correct: bool = False
    alpha: float = 1.0
    n_lambda: int = 100
    inner_k: int = 5
    grid: Dict = field(default_factory=dict)
    tune_threshold: bool = False
    seed: int = 0
    out: Optional[str] = None
    parallel: int = 1

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.parallel == 0:
            raise ConfigError("parallel must be a positive worker count or -1 for all cores")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        for name in (self.scheme, self.base):
            if name not in SCHEMES:
                raise ConfigError(f"unknown scheme '{name}'; expected one of {list(SCHEMES)}")

    @classmethod
    def resolve(cls, flags: Optional[Mapping] = None, config_path: Optional[str] = None,
                environ: Optional[Mapping] = None) -> "RunConfig":
        """Merge defaults, the seed environment variable, a JSON config file and flags (None flags are unset)."""
        environ = os.environ if environ is None else environ
        known = {f.name for f in fields(cls)}
        values: Dict = {}

        if environ.get(SEED_ENV) not in (None, ""):
            try:
                values["seed"] = int(environ[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from None

        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise FileNotFoundError(f"File not found: {path}")
            try:
                doc = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: expected a JSON object")
            unknown = sorted(set(doc) - known)
            if unknown:
                raise ConfigError(f"{path}: unknown config keys {unknown}")
            values.update(doc)

        schema_flags = {}
        for key, value in (flags or {}).items():
            if value is None:
                continue
            if key.startswith("schema."):
                schema_flags[key[len("schema."):]] = value
            elif key in known:
                values[key] = value
            else:
                raise ConfigError(f"unknown setting '{key}'")
        if schema_flags:
            values["schema"] = {**(values.get("schema") or {}), **schema_flags}

        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self, reproducible_only: bool = False) -> Dict:
        out = asdict(self)
        if reproducible_only:
            for key in EXECUTION_ONLY:
                out.pop(key)
        return out

    def write(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "config.json"
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path

    # ---- dataset and model resolution ----
    def csv_schema(self) -> CsvSchema:
        schema = dict(self.schema or {})
        if "response_column" not in schema:
            raise ConfigError("a CSV dataset needs a response column (--response or schema.response_column)")
        for key in ("feature_columns", "coord_columns"):
            if isinstance(schema.get(key), str):
                schema[key] = [c for c in schema[key].split(",") if c]
        return CsvSchema.from_dict(schema)

    def load_dataset(self) -> Dataset:
        if not self.dataset:
            raise ConfigError("no dataset given (--dataset PATH or demo:<name>)")
        if self.dataset.startswith(DEMO_PREFIX):
            from simulation.data_generator import demo_dataset

            return demo_dataset(self.dataset[len(DEMO_PREFIX):])
        return load_csv(self.dataset, self.csv_schema())

    def model_specs(self, data: Dataset) -> List[ModelSpec]:
        return [model_spec_from_dict(m, data) for m in self.models]


def resolve_features(features: Sequence, data: Dataset) -> tuple:
    """Feature references (column names or integer indices) -> indices into data.features."""
    out = []
    for ref in features:
        if isinstance(ref, int) or (isinstance(ref, str) and ref.isdigit()):
            j = int(ref)
            if not 0 <= j < data.p:
                raise ConfigError(f"feature index {j} out of range for p={data.p}")
            out.append(j)
        else:
            try:
                out.append(data.feature_names.index(ref))
            except ValueError:
                raise DataError(f"no feature named '{ref}'; available: {list(data.feature_names)}") from None
    return tuple(out)


def model_spec_from_dict(d: Mapping, data: Dataset) -> ModelSpec:
    if "family" not in d:
        raise ConfigError(f"model entry {dict(d)} has no family")
    family = str(d["family"]).replace("-", "_")
    features = d.get("features")
    if features is None:
        features = () if family == "growth" else range(data.p)
    return ModelSpec(
        family=family,
        features=resolve_features(list(features), data),
        hyperparameters=dict(d.get("hyperparameters") or {}),
        complexity_rank=d.get("complexity_rank"),
        name=d.get("name"),
    )
