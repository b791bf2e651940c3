# ---------------------- tests/test_experiments.py ----------------------
import numpy as np
import pytest

from core.errors import ConfigError
from simulation.experiments import EXPERIMENTS, ExperimentConfig, default_config, run_experiment

SMALL = dict(p=4, n=30, complexities=(0, 1, 2), model_features=(0, 1, 2), n_eval=20, n_truth=2000)


def test_bias_variance_structure():
    report = run_experiment("bias-variance", replicates=5, **SMALL)
    assert report.name == "bias-variance"
    assert report.cells == ["k=0", "k=1", "k=2"]
    for cell in report.cells:
        for statistic in ("bias2", "variance", "expected_loss", "noise", "residual", "loo_estimate"):
            assert np.isfinite(report.value(cell, statistic))
        assert report.value(cell, "noise") == 1.0
        assert report.value(cell, "variance") > 0.0


def test_reports_are_deterministic_for_a_seed():
    a = run_experiment("bias-variance", replicates=4, seed=7, **SMALL)
    b = run_experiment("bias-variance", replicates=4, seed=7, **SMALL)
    c = run_experiment("bias-variance", replicates=4, seed=8, **SMALL)
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != c.to_dict()


def test_parallel_replicates_match_sequential():
    sequential = run_experiment("k-bias", replicates=4, k_values=(2, "n"), **SMALL)
    parallel = run_experiment("k-bias", replicates=4, k_values=(2, "n"), n_jobs=2, **SMALL)
    assert parallel.rows == sequential.rows


def test_k_bias_structure():
    report = run_experiment("k-bias", replicates=3, k_values=(2, 5, "n"), **SMALL)
    assert report.cells == ["truth", "K=2", "K=5", "loo", "K=2 vs K=5", "K=5 vs loo"]
    assert report.value("loo", "bias") == pytest.approx(
        report.value("loo", "estimate") - report.value("truth", "true_score"))
    assert report.value("loo", "corrected_bias") == report.value("loo", "bias")
    assert np.isfinite(report.value("K=2", "corrected_gap_vs_loo"))


def test_repeat_vs_large_k_structure():
    report = run_experiment("repeat-vs-large-k", replicates=3, repeats=2, folds=3, **SMALL)
    assert report.cells == ["truth", "2x3-fold", "6-fold", "repeated vs single"]
    assert report.value("6-fold", "variance") >= 0.0


def test_repeat_vs_large_k_needs_room():
    with pytest.raises(ConfigError, match="exceeds n"):
        run_experiment("repeat-vs-large-k", replicates=2, repeats=4, folds=10, **SMALL)


def test_consistency_structure():
    report = run_experiment("consistency", replicates=3, n_values=(40,), ldo_iterations=5, **SMALL)
    assert report.cells == ["n=40"]
    assert report.value("n=40", "d") == 26
    for statistic in ("loo_true_rate", "ldo_true_rate", "loo_overfit_rate", "ldo_overfit_rate"):
        assert 0.0 <= report.value("n=40", statistic) <= 1.0


def test_growth_foci_structure():
    report = run_experiment("growth-foci", growth_groups=4, growth_per_group=8,
                            growth_functions=("von_bertalanffy",))
    assert set(report.extra) == {"conditional", "marginal"}
    for focus, selection in report.extra.items():
        ids = [m["id"] for m in selection["models"]]
        assert selection["selected"] in ids
        assert selection["rule"] == "ose_diff"
        assert all(cell.split(":", 1)[0] in ("conditional", "marginal") for cell in report.cells)
        assert report.value(f"{focus}:{selection['best']}", "delta") == 0.0


def test_report_frame_is_tidy():
    report = run_experiment("bias-variance", replicates=3, **SMALL)
    frame = report.to_frame()
    assert list(frame.columns) == ["experiment", "cell", "statistic", "value", "mc_se"]
    assert len(frame) == len(report.rows)
    assert set(frame["experiment"]) == {"bias-variance"}


def test_raw_values_are_kept_on_request():
    report = run_experiment("bias-variance", replicates=3, keep_raw=True, **SMALL)
    assert np.asarray(report.to_dict()["raw"]["loo"]).shape == (3, 3)


@pytest.mark.parametrize("overrides,message", [
    ({"replicates": 1}, "replicates"),
    ({"complexities": ()}, "complexities"),
    ({"generator": "poisson"}, "unknown generator"),
    ({"family": "logistic"}, "OLS"),
    ({"kind": "absolute_error"}, "squared error"),
    ({"p": 3}, "exceed"),
])
def test_config_validation(overrides, message):
    with pytest.raises(ConfigError, match=message):
        ExperimentConfig(**overrides)


def test_config_round_trip():
    cfg = ExperimentConfig(replicates=7, k_values=(2, "n"))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_unknown_experiment():
    with pytest.raises(ConfigError, match="unknown experiment"):
        run_experiment("jackknife")
    with pytest.raises(ConfigError, match="unknown experiment"):
        default_config("jackknife")


def test_defaults_per_experiment():
    assert set(EXPERIMENTS) == {"bias-variance", "k-bias", "repeat-vs-large-k", "consistency", "growth-foci"}
    assert default_config("consistency").replicates == 100
    assert default_config("k-bias", replicates=None).replicates == 200


@pytest.mark.slow
def test_bias_variance_decomposition_balances():
    report = run_experiment("bias-variance")
    variances = []
    for cell in report.cells:
        assert abs(report.value(cell, "residual")) <= 3 * report.se(cell, "residual")
        parts = report.value(cell, "bias2") + report.value(cell, "variance") + report.value(cell, "noise")
        slack = 3 * (report.se(cell, "expected_loss") + report.se(cell, "bias2") + report.se(cell, "variance"))
        assert abs(parts - report.value(cell, "expected_loss")) <= slack
        variances.append((report.value(cell, "variance"), report.se(cell, "variance")))
    for (v0, _), (v1, s1) in zip(variances, variances[1:]):
        assert v1 >= v0 - 2 * s1


@pytest.mark.slow
def test_smaller_training_sets_bias_k_fold_upwards():
    report = run_experiment("k-bias", k_values=(2, 10, "n"))
    for pair in ("K=2 vs K=10", "K=10 vs loo"):
        assert report.value(pair, "estimate_gap") > 2 * report.se(pair, "estimate_gap")
    assert abs(report.value("loo", "bias")) <= 3 * report.se("loo", "bias")
    assert abs(report.value("K=2", "corrected_gap_vs_loo")) < abs(report.value("K=2", "gap_vs_loo"))
    corrected_vs_loo = report.value("K=2", "corrected_bias") - report.value("loo", "bias")
    assert abs(corrected_vs_loo) <= 3 * np.hypot(report.se("K=2", "corrected_bias"), report.se("loo", "bias"))


@pytest.mark.slow
def test_leave_d_out_overfits_less_than_leave_one_out():
    report = run_experiment("consistency", n_values=(1000,))
    cell = "n=1000"
    assert report.value(cell, "loo_true_rate") < 1.0
    loo, ldo = report.value(cell, "loo_overfit_rate"), report.value(cell, "ldo_overfit_rate")
    assert ldo < loo - 2 * report.se(cell, "loo_overfit_rate")


@pytest.mark.slow
def test_growth_foci_default_run():
    report = run_experiment("growth-foci")
    conditional = report.extra["conditional"]
    marginal = report.extra["marginal"]
    assert conditional["kind"] == marginal["kind"] == "gaussian_log_density"
    assert conditional["plan_fingerprint"] != marginal["plan_fingerprint"]
    for focus, result in (("conditional", conditional), ("marginal", marginal)):
        assert result["rule"] == "ose_diff"
        rows = {row["id"]: row for row in result["models"]}
        assert len(rows) >= 2
        assert all(row["sigma_diff"] is not None and row["sigma_diff"] >= 0.0 for row in rows.values())
        assert rows[result["best"]]["sigma_diff"] == pytest.approx(0.0, abs=1e-6)
        for model_id, row in rows.items():
            assert report.se(f"{focus}:{model_id}", "delta") == row["sigma_diff"]
