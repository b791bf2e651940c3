# ---------------------- tests/test_models.py ----------------------
import numpy as np
import pytest

from core.errors import FitError, RankDeficiencyError, SeparationError
from core.models import (
    ElasticNetConfig,
    ModelSpec,
    all_subsets_specs,
    fit_elastic_net,
    fit_logistic,
    fit_model,
    fit_ols,
    lambda_path,
    nested_specs,
)
from simulation.data_generator import simulate_linear, simulate_logistic
from utils.data import Dataset


@pytest.fixture
def gaussian():
    rng = np.random.default_rng(42)
    X = rng.standard_normal((80, 4))
    y = 1.0 + X @ np.array([1.0, -0.5, 0.25, 0.0]) + 0.5 * rng.standard_normal(80)
    return Dataset(X, y)


def test_ols_exact_line():
    x = np.linspace(-3.0, 3.0, 25)
    fitted = fit_ols(Dataset(x, 2.0 * x))
    assert fitted.coefficients[0] == pytest.approx(0.0, abs=1e-10)
    assert fitted.coefficients[1] == pytest.approx(2.0, abs=1e-10)
    assert fitted.extras["rss"] == pytest.approx(0.0, abs=1e-10)


def test_ols_matches_lstsq(gaussian):
    fitted = fit_ols(gaussian)
    expected, *_ = np.linalg.lstsq(gaussian.design(range(4)), gaussian.response, rcond=None)
    assert np.allclose(fitted.coefficients, expected, atol=1e-10)
    assert fitted.names == ("(intercept)", "x1", "x2", "x3", "x4")


def test_hat_values_sum_to_the_column_count(gaussian):
    fitted = fit_ols(gaussian, features=(0, 2))
    assert fitted.hat_values.sum() == pytest.approx(3.0, abs=1e-10)
    assert np.all((fitted.hat_values > 0) & (fitted.hat_values < 1))


def test_duplicate_column_is_rank_deficient(gaussian):
    X = np.column_stack([gaussian.features[:, 0], gaussian.features[:, 0]])
    with pytest.raises(RankDeficiencyError, match="collinear columns"):
        fit_ols(Dataset(X, gaussian.response))


def test_intercept_only_prediction(gaussian):
    fitted = fit_ols(gaussian, features=())
    pred = fitted.predict(gaussian)
    assert np.allclose(pred.mean, gaussian.response.mean())
    assert np.allclose(pred.sigma, gaussian.response.std())


def test_logistic_balanced_intercept_only():
    y = np.array([0.0, 1.0] * 20)
    data = Dataset(np.ones((40, 1)), y, task="classification")
    fitted = fit_logistic(data, features=())
    assert fitted.coefficients[0] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(fitted.predict(data).prob, 0.5)


def test_logistic_constant_feature_collides_with_intercept():
    y = np.array([0.0, 1.0] * 20)
    data = Dataset(np.ones((40, 1)), y, task="classification")
    with pytest.raises(RankDeficiencyError):
        fit_logistic(data)


def test_logistic_recovers_coefficients():
    data = simulate_logistic(2000, (0.5, -1.0), seed=11)
    fitted = fit_logistic(data)
    X = data.design([0, 1])
    p = fitted.predict(data).prob
    cov = np.linalg.inv(X.T @ (X * (p * (1 - p))[:, None]))
    se = np.sqrt(np.diag(cov))
    truth = np.array([0.0, 0.5, -1.0])
    assert np.all(np.abs(fitted.coefficients - truth) < 3 * se)


def test_logistic_likelihood_never_decreases():
    data = simulate_logistic(300, (1.0, 2.0, -1.0), intercept=0.3, seed=5)
    trace = np.array(fit_logistic(data).extras["loglik_trace"])
    assert np.all(np.diff(trace) >= -1e-9)


def test_logistic_separation_is_detected():
    x = np.linspace(-2.0, 2.0, 40)
    data = Dataset(x, (x > 0).astype(float), task="classification")
    with pytest.raises(SeparationError):
        fit_logistic(data)


def test_logistic_needs_both_classes():
    data = Dataset(np.arange(5.0), np.zeros(5), task="classification")
    with pytest.raises(FitError, match="both classes"):
        fit_logistic(data)


def test_elastic_net_without_penalty_is_ols(gaussian):
    fitted = fit_elastic_net(gaussian, ElasticNetConfig(alpha=1.0, lam=0.0))
    assert np.allclose(fitted.coefficients, fit_ols(gaussian).coefficients, atol=1e-6)


def test_lasso_on_orthonormal_design_is_soft_thresholding():
    rng = np.random.default_rng(3)
    n, p = 60, 4
    Z = rng.standard_normal((n, p))
    Z -= Z.mean(axis=0)
    Q, _ = np.linalg.qr(Z)
    X = Q * np.sqrt(n)
    y = 0.7 + X @ np.array([1.0, -0.4, 0.1, 0.0]) + 0.3 * rng.standard_normal(n)
    data = Dataset(X, y)
    lam = 0.2
    fitted = fit_elastic_net(data, ElasticNetConfig(alpha=1.0, lam=lam))
    beta_ols = X.T @ (y - y.mean()) / n
    expected = np.sign(beta_ols) * np.maximum(np.abs(beta_ols) - lam, 0.0)
    assert np.allclose(fitted.coefficients[1:], expected, atol=1e-6)


def test_ridge_matches_closed_form(gaussian):
    lam = 0.3
    fitted = fit_elastic_net(gaussian, ElasticNetConfig(alpha=0.0, lam=lam))
    X = gaussian.features
    Xs = (X - X.mean(axis=0)) / X.std(axis=0)
    n = X.shape[0]
    yc = gaussian.response - gaussian.response.mean()
    expected = np.linalg.solve(Xs.T @ Xs / n + lam * np.eye(X.shape[1]), Xs.T @ yc / n)
    assert np.allclose(fitted.extras["standardized_coefficients"], expected, atol=1e-6)


def test_lasso_is_empty_at_lambda_max(gaussian):
    lam_max = lambda_path(gaussian, 1.0, 10)[0]
    fitted = fit_elastic_net(gaussian, ElasticNetConfig(alpha=1.0, lam=lam_max))
    assert fitted.extras["nonzero"] == 0
    assert np.all(fitted.coefficients[1:] == 0.0)


def test_lambda_path_is_geometric(gaussian):
    grid = lambda_path(gaussian, 0.5, 25)
    assert grid.size == 25
    assert np.all(np.diff(grid) < 0)
    ratios = grid[1:] / grid[:-1]
    assert np.ptp(ratios) < 1e-12


def test_lambda_path_rejects_constant_response():
    data = Dataset(np.random.default_rng(0).standard_normal((10, 2)), np.ones(10))
    with pytest.raises(FitError, match="constant"):
        lambda_path(data, 1.0)


def test_lasso_sparsity_grows_with_lambda():
    data = simulate_linear(150, beta=(1.0, 0.5, 0.25) + (0.0,) * 5, seed=4)
    grid = lambda_path(data, 1.0, 12)
    counts = [fit_elastic_net(data, ElasticNetConfig(1.0, lam)).extras["nonzero"] for lam in grid]
    assert counts[0] == 0
    assert counts[-1] >= 3


def test_logistic_elastic_net_without_penalty_matches_irls():
    data = simulate_logistic(300, (1.0, -0.5), seed=9)
    penalised = fit_elastic_net(data, ElasticNetConfig(alpha=1.0, lam=0.0), objective="logistic")
    assert np.allclose(penalised.coefficients, fit_logistic(data).coefficients, atol=1e-5)


def test_elastic_net_config_validation():
    with pytest.raises(FitError, match="alpha"):
        ElasticNetConfig(alpha=1.5)
    with pytest.raises(FitError, match="lambda"):
        ElasticNetConfig(lam=-1.0)


def test_model_spec_identity():
    spec = ModelSpec("ols", (0, 2))
    assert spec.model_id == "ols[0,2]"
    assert spec.complexity_rank == 3
    tuned = ModelSpec("elastic_net", (0,), {"alpha": 0.5}).with_hyperparameters(**{"lambda": 0.1})
    assert tuned.model_id == "elastic_net[0]{alpha=0.5,lambda=0.1}"
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_model_spec_rejects_duplicate_features():
    with pytest.raises(FitError, match="duplicate"):
        ModelSpec("ols", (1, 1))


def test_unknown_family():
    with pytest.raises(FitError, match="unknown model family"):
        fit_model(ModelSpec("forest", (0,)), Dataset(np.ones((3, 1)), [1.0, 2.0, 3.0]))


def test_candidate_generators():
    subsets = all_subsets_specs("ols", [0, 1, 2])
    assert len(subsets) == 8
    assert subsets[0].features == ()
    assert len(all_subsets_specs("ols", [0, 1, 2], max_size=1)) == 4
    nested = nested_specs("ols", [2, 0, 1])
    assert [s.features for s in nested] == [(), (2,), (2, 0), (2, 0, 1)]
