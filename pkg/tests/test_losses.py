# ---------------------- tests/test_losses.py ----------------------
import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import assume, given, settings

from core.errors import LossError
from core.losses import (
    SCORE_PROPERTIES,
    ConfusionMatrix,
    Prediction,
    PredictionBatch,
    aggregate_metric,
    build_confusion,
    confusion_metric,
    get_kind,
    loss_vector,
    pointwise_loss,
    propriety_grid,
)
from core.splitters import make_kfold, make_repeated_kfold

counts = st.integers(0, 500)


def test_squared_error_point():
    assert pointwise_loss("squared_error", 3.0, Prediction(mean=1.0)) == 4.0


def test_absolute_error_point():
    assert pointwise_loss("absolute_error", 3.0, Prediction(mean=1.0)) == 2.0


def test_brier_point():
    assert pointwise_loss("brier", 1.0, Prediction(prob=0.5)) == pytest.approx(0.5, abs=1e-15)


def test_log_loss_is_log_probability_of_the_outcome():
    assert pointwise_loss("log_loss", 1.0, Prediction(prob=0.8)) == pytest.approx(math.log(0.8))
    assert pointwise_loss("log_loss", 0.0, Prediction(prob=0.8)) == pytest.approx(math.log(0.2))


def test_log_loss_clamps_certain_mistakes():
    value = pointwise_loss("log_loss", 1.0, Prediction(prob=0.0))
    assert np.isfinite(value)
    assert value == pytest.approx(math.log(1e-15))


def test_gaussian_log_density_point():
    value = pointwise_loss("gaussian_log_density", 1.0, Prediction(mean=1.0, sigma=1.0))
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_gaussian_log_density_needs_positive_sigma():
    with pytest.raises(LossError, match="positive dispersion"):
        pointwise_loss("gaussian_log_density", 1.0, Prediction(mean=1.0, sigma=0.0))


def test_missing_prediction_field():
    with pytest.raises(LossError, match="sigma"):
        loss_vector("gaussian_log_density", [1.0], PredictionBatch(mean=np.array([1.0])))


def test_misclassification_uses_strict_threshold():
    pred = PredictionBatch(prob=np.array([0.5, 0.51, 0.2]), threshold=0.5)
    assert loss_vector("misclassification", [1.0, 1.0, 1.0], pred).tolist() == [1.0, 0.0, 1.0]


def test_unknown_kind():
    with pytest.raises(LossError, match="unknown loss"):
        get_kind("hinge")


def test_metric_is_not_a_pointwise_loss():
    with pytest.raises(LossError, match="confusion-matrix metric"):
        loss_vector("mcc", [1.0], PredictionBatch(prob=np.array([0.4])))


def test_orientation_flags():
    assert get_kind("squared_error").orientation == "lower_is_better"
    assert get_kind("log_loss").higher_is_better
    assert get_kind("mcc").utility(0.3) == 0.3
    assert get_kind("brier").utility(0.3) == -0.3


def test_score_properties_cover_every_loss():
    assert SCORE_PROPERTIES["log_loss"]["local"]
    assert not SCORE_PROPERTIES["brier"]["local"]
    assert SCORE_PROPERTIES["spherical"]["strictly_proper"]


def test_confusion_two_points():
    cm = build_confusion([0.9, 0.2], [1, 0], 0.5)
    assert (cm.tp, cm.tn, cm.fp, cm.fn) == (1, 1, 0, 0)


def test_confusion_hand_count():
    cm = build_confusion([0.9, 0.8, 0.2, 0.4, 0.1, 0.7], [1, 1, 1, 0, 0, 0], 0.5)
    assert (cm.tp, cm.fn, cm.fp, cm.tn) == (2, 1, 1, 2)


def test_confusion_rejects_bad_input():
    with pytest.raises(LossError, match="differ in length"):
        build_confusion([0.1, 0.2], [1], 0.5)
    with pytest.raises(LossError, match="threshold"):
        build_confusion([0.1], [1], 1.0)


def test_metric_values():
    cm = ConfusionMatrix(tp=3, fp=1, fn=2, tn=4)
    assert confusion_metric(cm, "accuracy") == pytest.approx(0.7)
    assert confusion_metric(cm, "mcc") == pytest.approx(10 / math.sqrt(600))
    assert confusion_metric(cm, "sensitivity") == pytest.approx(0.6)
    assert confusion_metric(cm, "specificity") == pytest.approx(0.8)
    assert confusion_metric(cm, "f1") == pytest.approx(6 / 9)


def test_degenerate_denominators_give_zero():
    cm = ConfusionMatrix(tp=0, fp=0, fn=0, tn=5)
    assert confusion_metric(cm, "mcc") == 0.0
    assert confusion_metric(cm, "f1") == 0.0
    assert confusion_metric(cm, "sensitivity") == 0.0


@given(counts, counts, counts, counts)
def test_tss_identity(tp, fp, fn, tn):
    assume(tp + fn > 0 and tn + fp > 0)
    cm = ConfusionMatrix(tp, fp, fn, tn)
    expected = confusion_metric(cm, "sensitivity") + confusion_metric(cm, "specificity") - 1.0
    assert confusion_metric(cm, "tss") == pytest.approx(expected, abs=1e-15)


@given(counts, counts, counts, counts)
def test_mcc_and_tss_are_symmetric_in_the_classes(tp, fp, fn, tn):
    assume(tp + fp + fn + tn > 0)
    cm = ConfusionMatrix(tp, fp, fn, tn)
    for kind in ("mcc", "tss", "kappa", "accuracy"):
        assert confusion_metric(cm.swapped(), kind) == pytest.approx(confusion_metric(cm, kind), abs=1e-12)


@pytest.mark.slow
@settings(max_examples=1000, deadline=None)
@given(counts, counts, counts, counts)
def test_metric_identities_over_a_thousand_matrices(tp, fp, fn, tn):
    assume(tp + fn > 0 and tn + fp > 0)
    cm = ConfusionMatrix(tp, fp, fn, tn)
    expected = confusion_metric(cm, "sensitivity") + confusion_metric(cm, "specificity") - 1.0
    assert confusion_metric(cm, "tss") == pytest.approx(expected, abs=1e-15)
    for kind in ("mcc", "tss"):
        assert confusion_metric(cm.swapped(), kind) == pytest.approx(confusion_metric(cm, kind), abs=1e-12)


@given(st.integers(1, 500), st.integers(1, 500))
def test_perfect_classification(tp, tn):
    cm = ConfusionMatrix(tp, 0, 0, tn)
    assert confusion_metric(cm, "mcc") == pytest.approx(1.0)
    assert confusion_metric(cm, "tss") == pytest.approx(1.0)
    assert confusion_metric(cm, "kappa") == pytest.approx(1.0)


@given(counts, counts, counts, counts)
def test_metrics_stay_in_range(tp, fp, fn, tn):
    assume(tp + fp + fn + tn > 0)
    cm = ConfusionMatrix(tp, fp, fn, tn)
    assert -1.0 - 1e-12 <= confusion_metric(cm, "mcc") <= 1.0 + 1e-12
    assert 0.0 <= confusion_metric(cm, "accuracy") <= 1.0


@pytest.mark.parametrize("kind", ["brier", "log_loss", "spherical"])
@pytest.mark.parametrize("q", [0.1, 0.3, 0.5, 0.77])
def test_strictly_proper_scores_peak_at_the_truth(kind, q):
    grid, expected = propriety_grid(kind, q)
    utility = get_kind(kind).utility(expected)
    assert grid[int(np.argmax(utility))] == pytest.approx(q)


def test_misclassification_is_not_strictly_proper():
    grid, expected = propriety_grid("misclassification", 0.8)
    optimal = grid[expected == expected.min()]
    assert optimal.size > 1


def test_aggregate_metric_single_repetition():
    y = np.array([1, 0] * 10)
    plan = make_kfold(20, 4, seed=0)
    probs = [np.where(y[s.test_idx] == 1, 0.9, 0.1) for s in plan.splits]
    values = aggregate_metric(probs, y, plan, 0.5, "mcc")
    assert values.shape == (1,)
    assert values[0] == pytest.approx(1.0)


def test_aggregate_metric_per_repetition():
    y = np.array([1, 0] * 10)
    plan = make_repeated_kfold(20, 4, 3, seed=0)
    probs = [np.where(y[s.test_idx] == 1, 0.9, 0.1) for s in plan.splits]
    assert np.allclose(aggregate_metric(probs, y, plan, 0.5, "tss"), [1.0, 1.0, 1.0])


def test_aggregate_metric_needs_every_split():
    y = np.array([1, 0] * 5)
    plan = make_kfold(10, 2, seed=0)
    with pytest.raises(LossError, match="expected predictions for 2 splits"):
        aggregate_metric([np.full(5, 0.5)], y, plan)


def test_aggregate_metric_with_one_threshold_per_split():
    y = np.array([1, 0] * 10)
    plan = make_kfold(20, 4, seed=0)
    probs = [np.where(y[s.test_idx] == 1, 0.7, 0.3) for s in plan.splits]
    assert aggregate_metric(probs, y, plan, [0.5] * 4, "accuracy")[0] == pytest.approx(1.0)
    # every split but the first calls everything negative
    values = aggregate_metric(probs, y, plan, [0.5, 0.8, 0.8, 0.8], "sensitivity")
    first = plan.splits[0].test_idx
    assert values[0] == pytest.approx(np.sum(y[first]) / np.sum(y))
    with pytest.raises(LossError, match="expected 4 thresholds"):
        aggregate_metric(probs, y, plan, [0.5, 0.5], "mcc")
