# ---------------------- tests/test_report.py ----------------------
import json

import numpy as np
import pandas as pd
import pytest

from core.engine import cv_score
from core.errors import ReportError
from core.models import ModelSpec
from core.selection import score_table, select
from core.splitters import FoldPlan, make_kfold, make_repeated_kfold
from simulation.data_generator import demo_dataset
from utils.report import (
    SCHEMA_VERSION,
    build_envelope,
    canonical_json,
    dumps_report,
    read_report,
    write_pointwise_csv,
    write_report,
)

STAMP = "2024-01-01T00:00:00+00:00"


@pytest.fixture(scope="module")
def selection():
    data = demo_dataset("linear")
    plan = make_kfold(data.n, 5, seed=3)
    models = [ModelSpec("ols", tuple(range(k))) for k in range(4)]
    return select(score_table(models, data, plan, "squared_error"), "ose_modified")


def test_selection_round_trip(selection, tmp_path):
    path = write_report(selection, tmp_path / "out" / "selection.json", config={"seed": 3}, created_at=STAMP)
    envelope = read_report(path)
    assert envelope.payload_type == "selection_result"
    assert envelope.schema_version == SCHEMA_VERSION
    assert envelope.payload == json.loads(canonical_json(selection.to_dict()))
    assert envelope.plan_fingerprint == selection.plan_fingerprint
    assert envelope.config == {"seed": 3}


def test_identical_bytes_for_identical_runs(selection):
    a = dumps_report(selection, config={"seed": 3}, created_at=STAMP)
    b = dumps_report(selection, config={"seed": 3}, created_at=STAMP)
    assert a == b
    assert a.endswith("\n")


def test_floats_survive_the_round_trip(selection, tmp_path):
    path = write_report(selection, tmp_path / "s.json", created_at=STAMP)
    rows = read_report(path).payload["models"]
    for row, original in zip(rows, selection.models):
        assert row["mean"] == original.mean
        assert row["se"] == original.se


def test_plan_fingerprint_comes_from_the_plan(tmp_path):
    plan = make_repeated_kfold(30, 3, 2, seed=4)
    envelope = read_report(write_report(plan, tmp_path / "plan.json", created_at=STAMP))
    assert envelope.payload_type == "fold_plan"
    assert envelope.plan_fingerprint == plan.fingerprint()
    assert FoldPlan.from_dict(envelope.payload).same_splits(plan)


def test_mismatched_fingerprint_is_rejected(selection):
    with pytest.raises(ReportError, match="does not match"):
        build_envelope(selection, plan_fingerprint="ffffffffffffffff")


def test_nan_is_rejected():
    with pytest.raises(ReportError, match="NaN or infinite"):
        canonical_json({"value": float("nan")})
    with pytest.raises(ReportError, match="NaN or infinite"):
        dumps_report({"value": np.inf}, created_at=STAMP)


def test_truncated_file_reports_the_offset(selection, tmp_path):
    text = dumps_report(selection, created_at=STAMP)
    path = tmp_path / "truncated.json"
    path.write_text(text[:200], encoding="utf-8")
    with pytest.raises(ReportError, match="byte offset"):
        read_report(path)


def test_unknown_keys_are_preserved(tmp_path):
    doc = json.loads(dumps_report({"a": 1}, created_at=STAMP))
    doc["future_field"] = {"x": [1, 2]}
    path = tmp_path / "future.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    envelope = read_report(path)
    assert envelope.unknown == {"future_field": {"x": [1, 2]}}
    assert envelope.to_dict()["future_field"] == {"x": [1, 2]}
    assert envelope.payload_type == "raw"


def test_schema_version_mismatch(tmp_path):
    doc = json.loads(dumps_report({"a": 1}, created_at=STAMP))
    doc["schema_version"] = 2
    path = tmp_path / "v2.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(ReportError, match="expected 1, found 2"):
        read_report(path)


def test_missing_report_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_report(tmp_path / "absent.json")


def test_pointwise_sidecar(tmp_path):
    data = demo_dataset("linear")
    est = cv_score(ModelSpec("ols", (0, 1)), data, make_kfold(data.n, 5, seed=1), want_bias_correction=True)
    frame = pd.read_csv(write_pointwise_csv(est, tmp_path / "pointwise.csv"), float_precision="round_trip")
    assert list(frame.columns) == ["index", "loss", "corrected_loss"]
    assert frame["index"].tolist() == list(range(data.n))
    assert np.array_equal(frame["loss"].to_numpy(), est.pointwise.values)


def test_pointwise_sidecar_needs_pointwise_losses(tmp_path):
    data = demo_dataset("linear")
    est = cv_score(ModelSpec("ols", (0,)), data, make_repeated_kfold(data.n, 5, 2, seed=1))
    with pytest.raises(ReportError, match="no pointwise losses"):
        write_pointwise_csv(est, tmp_path / "pointwise.csv")
