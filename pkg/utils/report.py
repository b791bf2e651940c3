# ---------------------- utils/report.py ----------------------
# Report envelopes and canonical JSON / tidy CSV writers
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd

from core import __version__
from core.errors import ReportError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# type(payload).__name__ -> payload_type tag
PAYLOAD_TYPES = {
    "FoldPlan": "fold_plan",
    "ScoreEstimate": "score_estimate",
    "SelectionResult": "selection_result",
    "LambdaTuning": "lambda_tuning",
    "NestedResult": "nested_result",
    "ExperimentReport": "experiment_report",
}

_ENVELOPE_KEYS = ("schema_version", "version", "created_at", "payload_type", "payload", "config",
                  "plan_fingerprint", "extra")


@dataclass
class ReportEnvelope:
    payload_type: str
    payload: Any
    config: Dict = field(default_factory=dict)
    plan_fingerprint: Optional[str] = None
    extra: Dict = field(default_factory=dict)
    version: str = __version__
    schema_version: int = SCHEMA_VERSION
    created_at: str = ""
    unknown: Dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "schema_version": self.schema_version,
            "version": self.version,
            "created_at": self.created_at,
            "payload_type": self.payload_type,
            "payload": self.payload,
            "config": self.config,
            "plan_fingerprint": self.plan_fingerprint,
            "extra": self.extra,
        }
        out.update(self.unknown)
        return out


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"{type(obj).__name__} is not JSON serialisable")


def canonical_json(obj) -> str:
    """
    Sorted keys, two-space indent, UTF-8 text. Floats use the shortest
    representation that reads back to the same binary64 value.
    """
    try:
        return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False,
                          default=_jsonable) + "\n"
    except ValueError as exc:
        raise ReportError(f"payload contains NaN or infinite values: {exc}") from None
    except TypeError as exc:
        raise ReportError(str(exc)) from None


def _payload_fingerprint(payload, data) -> Optional[str]:
    if hasattr(payload, "fingerprint"):
        return payload.fingerprint()
    if isinstance(data, dict):
        return data.get("plan_fingerprint")
    return None


def build_envelope(payload, config: Optional[Dict] = None, plan_fingerprint: Optional[str] = None,
                   payload_type: Optional[str] = None, extra: Optional[Dict] = None,
                   created_at: Optional[str] = None) -> ReportEnvelope:
    data = payload.to_dict() if hasattr(payload, "to_dict") else payload
    found = _payload_fingerprint(payload, data)
    if plan_fingerprint and found and plan_fingerprint != found:
        raise ReportError(f"plan fingerprint {plan_fingerprint} does not match the payload's plan {found}")
    return ReportEnvelope(
        payload_type=payload_type or PAYLOAD_TYPES.get(type(payload).__name__, "raw"),
        payload=data,
        config=dict(config or {}),
        plan_fingerprint=plan_fingerprint or found,
        extra=dict(extra or {}),
        created_at=created_at or datetime.now(timezone.utc).isoformat(),
    )


def dumps_report(payload, **kwargs) -> str:
    return canonical_json(build_envelope(payload, **kwargs).to_dict())


def write_report(payload, path: Union[str, Path], **kwargs) -> Path:
    """
    Write ``payload`` wrapped in a ReportEnvelope to ``path``.

    Keyword arguments go to build_envelope (config, plan_fingerprint,
    payload_type, extra, created_at).
    """
    text = dumps_report(payload, **kwargs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info("report written to %s", path)
    return path


def read_report(path: Union[str, Path]) -> ReportEnvelope:
    """Parse a report file; unknown top-level keys are kept in ``unknown``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    raw = path.read_bytes()
    text = raw.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ReportError(f"{path}: invalid JSON at byte offset {offset}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ReportError(f"{path}: expected a JSON object at the top level")
    found = doc.get("schema_version")
    if found != SCHEMA_VERSION:
        raise ReportError(f"{path}: unsupported schema version: expected {SCHEMA_VERSION}, found {found}")
    missing = [k for k in ("payload_type", "payload") if k not in doc]
    if missing:
        raise ReportError(f"{path}: envelope lacks {missing}")
    return ReportEnvelope(
        payload_type=doc["payload_type"],
        payload=doc["payload"],
        config=doc.get("config") or {},
        plan_fingerprint=doc.get("plan_fingerprint"),
        extra=doc.get("extra") or {},
        version=doc.get("version", ""),
        schema_version=found,
        created_at=doc.get("created_at", ""),
        unknown={k: v for k, v in doc.items() if k not in _ENVELOPE_KEYS},
    )


def write_tidy_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8", float_format="%.17g")
    return path


def write_pointwise_csv(estimate, path: Union[str, Path]) -> Path:
    """Sidecar with columns index, loss (and corrected_loss when available)."""
    if estimate.pointwise is None:
        raise ReportError(f"{estimate.model_id} has no pointwise losses (repeated plan or metric)")
    frame = pd.DataFrame({"index": estimate.pointwise.index, "loss": estimate.pointwise.values})
    if estimate.corrected_pointwise is not None:
        frame["corrected_loss"] = estimate.corrected_pointwise
    return write_tidy_csv(frame, path)
