# ---------------------- tests/test_growth.py ----------------------
import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from core.errors import ConvergenceError, FitError
from core.growth import (
    GROWTH_FUNCTIONS,
    GrowthSpec,
    fit_growth,
    growth_candidates,
    growth_curve,
    growth_jacobian,
)
from core.models import fit_model
from simulation.data_generator import simulate_growth
from utils.data import Dataset


@pytest.mark.parametrize("function,expected", [
    ("gompertz", 40.0 * math.exp(-1.0)),
    ("logistic", 20.0),
    ("von_bertalanffy", 0.0),
])
def test_curves_at_t0(function, expected):
    value = growth_curve(function, np.array([1.5]), 40.0, 0.3, 1.5)[0]
    assert value == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("function", GROWTH_FUNCTIONS)
def test_curves_approach_the_asymptote(function):
    L0, K, t0 = 55.0, 0.4, -0.2
    value = growth_curve(function, np.array([t0 + 50.0 / K]), L0, K, t0)[0]
    assert abs(value - L0) <= 1e-6 * L0


def test_unknown_function():
    with pytest.raises(FitError, match="unknown growth function"):
        growth_curve("richards", np.array([1.0]), 1.0, 1.0, 0.0)


@given(
    st.sampled_from(GROWTH_FUNCTIONS),
    st.floats(0.5, 10.0),
    st.floats(10.0, 100.0),
    st.floats(0.1, 1.0),
    st.floats(-1.0, 0.0),
)
def test_jacobian_matches_central_differences(function, age, L0, K, t0):
    theta = np.array([L0, K, t0])
    analytic = growth_jacobian(function, np.array([age]), L0, K, t0)[0]
    for j in range(3):
        step = 1e-6 * max(1.0, abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += step
        down[j] -= step
        numeric = (growth_curve(function, np.array([age]), *up)[0]
                   - growth_curve(function, np.array([age]), *down)[0]) / (2 * step)
        assert abs(numeric - analytic[j]) <= 1e-6 * max(1.0, abs(analytic[j]))


def test_noiseless_parameters_are_recovered():
    data = simulate_growth(4, 25, "von_bertalanffy", L0=100.0, K=0.5, t0=-0.1, group_sd=0.0, sigma=0.0,
                           seed=1)
    fitted = fit_growth(data, GrowthSpec("von_bertalanffy", group_intercepts_on_L0=False),
                        init={"L0": 90.0, "K": 0.4, "t0": 0.0})
    assert fitted.coefficients == pytest.approx([100.0, 0.5, -0.1], abs=1e-4)


def test_stalled_damping_away_from_a_minimum_fails(monkeypatch, caplog):
    import core.growth as growth

    data = simulate_growth(4, 25, seed=5)
    monkeypatch.setattr(growth, "LM_DAMPING_START", 1e17)
    with caplog.at_level("DEBUG", logger="core.growth"):
        with pytest.raises(ConvergenceError, match="Levenberg-Marquardt did not converge after 1 iterations"):
            fit_growth(data, GrowthSpec(group_intercepts_on_L0=False))
    assert "no damped step descends" in caplog.text


def test_exact_fit_stops_without_error():
    data = simulate_growth(3, 20, "logistic", L0=50.0, K=0.8, t0=2.0, group_sd=0.0, sigma=0.0, seed=6)
    fitted = fit_growth(data, GrowthSpec("logistic", group_intercepts_on_L0=False),
                        init={"L0": 45.0, "K": 0.7, "t0": 1.8})
    assert fitted.extras["rss"] <= 1e-12


def test_sex_effect_is_recovered():
    data = simulate_growth(6, 30, "gompertz", L0=40.0, K=0.6, t0=0.2, sex_effects={"L": 2.0},
                           group_sd=0.0, sigma=0.0, seed=2)
    fitted = fit_growth(data, GrowthSpec("gompertz", frozenset({"L"}), group_intercepts_on_L0=False),
                        init={"L0": 35.0, "K": 0.5, "t0": 0.0})
    assert fitted.names[:4] == ("L0", "K", "t0", "L:sex")
    assert fitted.coefficients[3] == pytest.approx(2.0, abs=1e-4)


def test_group_offsets_sum_to_zero():
    data = simulate_growth(5, 20, seed=3)
    fitted = fit_growth(data, GrowthSpec())
    offsets = fitted.extras["group_offsets"]
    assert offsets.size == 5
    assert abs(offsets.sum()) < 1e-10


def test_unseen_group_gets_no_offset():
    data = simulate_growth(5, 20, seed=3)
    fitted = fit_growth(data, GrowthSpec())
    fresh = Dataset(np.array([[3.0, 1.0]]), [0.0], feature_names=("age", "sex"), groups=["haul99"])
    L0, K, t0 = fitted.coefficients[:3]
    expected = growth_curve("von_bertalanffy", np.array([3.0]), L0, K, t0)
    assert fitted.predict(fresh).mean == pytest.approx(expected)


def test_growth_family_is_registered():
    data = simulate_growth(3, 15, seed=4)
    spec = GrowthSpec("von_bertalanffy", frozenset({"K"})).to_model_spec()
    fitted = fit_model(spec, data)
    assert fitted.spec.model_id == "vB|K"
    assert fitted.predict(data).mean.shape == (45,)


def test_group_with_one_observation_is_rejected():
    data = simulate_growth(3, 5, seed=5).subset(list(range(11)))
    with pytest.raises(FitError, match="single observation"):
        fit_growth(data, GrowthSpec())


def test_non_positive_age_is_rejected():
    data = Dataset(np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 1.0]]), [1.0, 2.0, 3.0], feature_names=("age", "sex"))
    with pytest.raises(FitError, match="positive ages"):
        fit_growth(data, GrowthSpec(group_intercepts_on_L0=False))


def test_growth_spec_validation():
    with pytest.raises(FitError, match="sex effects"):
        GrowthSpec(sex_effect_on=frozenset({"Q"}))


def test_candidate_structures():
    candidates = growth_candidates()
    assert len(candidates) == 24
    assert len({c.model_id for c in candidates}) == 24
    assert candidates[0].model_id == "G|0"
    assert candidates[-1].model_id == "vB|LKt"
    assert candidates[-1].complexity_rank == 6
