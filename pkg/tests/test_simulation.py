"""Tests for the Monte Carlo engine

Full-size scenario runs are marked slow; run them
with `pytest --runslow`. Their tolerances cover Monte Carlo noise only; the
expected values come from runs under a different generator.
"""

import numpy as np
import pytest
from scipy.stats import norm

from module.core_task import BatchProcessor, SimulationTask
from module.core_types import ModelBlock, PModel, TaskStatus, YModel
from module.simulation import (COMPARISON_COLUMNS, TABLE_COLUMNS, ScenarioConfig, SimulationSettings, generate_target,
                               generate_trial, mixed_means, builtin_grid, rows_to_frame, run_method_comparison,
                               run_scenario)
from pycalibra.calibration import CalibrationProblem, TargetSummary, solve_entropy
from pycalibra.estimators import weighted_mu1
from pycalibra.exceptions import DomainError
from pycalibra.numkit import RngStream


def small(**kwargs) -> ScenarioConfig:
    base = dict(n1=120, p=2, m=(0.3, 0.3), b=0.3, n0=500, n_runs=6, bootstrap_replicates=4, seed=11)
    base.update(kwargs)
    return ScenarioConfig(**base)


class TestScenarioConfig:
    def test_shifted(self):
        config = ScenarioConfig.shifted(500, 0.5, 3, ModelBlock.Y_INCORRECT)
        assert config.m == (0.5, 0.5, 0.5)
        assert config.y_model is YModel.THRESHOLD
        assert config.p_model is PModel.NORMAL
        assert config.label == "Y:W,P:R n1=500 b=0.5 p=3"
        assert config.block == "y_incorrect"

    def test_mixed(self):
        assert mixed_means(5) == (0.5, 0.5, 0.25, 0.25, 0.25)
        assert ScenarioConfig.mixed(200, 3).label == "Y:R,P:R n1=200 m=0.5/0.5/0.25 p=3"

    @pytest.mark.parametrize("kwargs", [dict(m=(0.1,)), dict(n_runs=0), dict(bootstrap_replicates=1),
                                        dict(sigma_eps=0.0), dict(threshold_noise=-0.1)])
    def test_invalid(self, kwargs):
        with pytest.raises(DomainError):
            small(**kwargs)

    def test_grids(self):
        assert len(builtin_grid("shift")) == 24
        assert len(builtin_grid("mixed")) == 18
        methods = builtin_grid("methods")
        assert len(methods) == 12
        assert {c.n1 for c in methods} == {200}
        assert {c.n_runs for c in methods} == {1000}
        assert {c.n_runs for c in builtin_grid("shift", n_runs=5)} == {5}
        with pytest.raises(DomainError):
            builtin_grid("table3")


class TestGenerators:
    @pytest.mark.parametrize("kwargs, expected", [
        (dict(y_model=YModel.LINEAR), 0.0),
        (dict(y_model=YModel.THRESHOLD), 0.0),
        (dict(y_model=YModel.THRESHOLD, threshold_noise=1.0), 0.5),
    ])
    def test_null_effect_truth(self, kwargs, expected):
        truth = generate_target(small(beta=0.0, **kwargs), RngStream(1))
        assert truth.mu1_true == pytest.approx(expected, abs=1e-15)

    def test_default_noise_levels(self):
        config = ScenarioConfig(n1=10, p=3, m=(0.5,) * 3)
        assert (config.sigma_eps, config.threshold_noise) == (0.5, 0.0)

    def test_linear_outcome_error_sd(self):
        config = small(n1=20000, n_runs=1)
        data = generate_trial(config, generate_target(config, RngStream(2)), RngStream(3))
        assert np.std(data.y - data.x @ config.coefficients) == pytest.approx(0.5, abs=0.01)

    def test_threshold_outcome_is_a_step(self):
        config = small(y_model=YModel.THRESHOLD)
        data = generate_trial(config, generate_target(config, RngStream(2)), RngStream(3))
        np.testing.assert_array_equal(data.y, (data.x @ config.coefficients > 0).astype(float))

    def test_threshold_unadjusted_bias(self):
        # trial P(beta'x > 0) = Phi(0.45 / sqrt(0.27)) against a target near 1/2
        config = ScenarioConfig.shifted(20000, 0.5, 3, ModelBlock.Y_INCORRECT, n_runs=1)
        truth = generate_target(config, RngStream(7))
        data = generate_trial(config, truth, RngStream(8))
        assert data.y.mean() - truth.mu1_true == pytest.approx(0.307, abs=0.04)
        assert data.y.mean() == pytest.approx(norm.cdf(0.45 / np.sqrt(0.27)), abs=0.015)

    def test_truth_is_close_to_zero(self):
        truth = generate_target(ScenarioConfig(n1=10, p=3, m=(0.0,) * 3, n0=2000), RngStream(5))
        # four SEs of the mean of 0.3 * sum(x)
        assert abs(truth.mu1_true) < 4 * 0.3 * np.sqrt(3) / np.sqrt(2000)
        assert truth.xbar0.shape == (3,)

    def test_target_is_reproducible(self):
        config = small()
        first = generate_target(config, RngStream(config.seed).child(0))
        second = generate_target(config, RngStream(config.seed).child(0))
        assert np.array_equal(first.xbar0, second.xbar0)
        assert first.mu1_true == second.mu1_true

    def test_lognormal_covariates_are_positive(self):
        config = small(p_model=PModel.LOGNORMAL)
        truth = generate_target(config, RngStream(2))
        data = generate_trial(config, truth, RngStream(3))
        assert np.all(data.x > 0)
        assert np.all(truth.xbar0 > 0)

    def test_threshold_outcomes_are_binary(self):
        config = small(y_model=YModel.THRESHOLD)
        data = generate_trial(config, generate_target(config, RngStream(2)), RngStream(3))
        assert data.n == 120
        assert set(np.unique(data.y).tolist()) <= {0.0, 1.0}

    def test_noiseless_linear_outcome(self):
        config = small(sigma_eps=1e-12, n1=300)
        truth = generate_target(config, RngStream(2))
        data = generate_trial(config, truth, RngStream(3))
        solution = solve_entropy(CalibrationProblem(data, TargetSummary(truth.xbar0)))
        assert weighted_mu1(data, solution) == pytest.approx(truth.xbar0 @ config.coefficients, abs=1e-7)


class TestRunScenario:
    def test_thread_count_does_not_change_rows(self):
        config = small()
        serial = run_scenario(config, SimulationSettings(threads=1)).to_record()
        threaded = run_scenario(config, SimulationSettings(threads=3)).to_record()
        assert serial == threaded

    def test_row_contents(self):
        row = run_scenario(small())
        assert 0.0 <= row.coverage_2s <= 1.0
        assert 0.0 <= row.coverage_boot <= 1.0
        assert row.se_2s > 0 and row.se_boot > 0 and row.se_maic > 0 and row.se_empirical > 0
        assert row.solver_failures == 0
        assert not row.degenerate

    def test_bootstrap_can_be_skipped(self):
        row = run_scenario(small(bootstrap_replicates=0))
        assert np.isnan(row.se_boot)
        assert np.isnan(row.coverage_boot)
        assert row.se_2s > 0

    def test_null_effect_is_unbiased(self):
        row = run_scenario(small(beta=0.0, sigma_eps=1e-6, n_runs=4, bootstrap_replicates=0))
        assert row.bias_unadjusted == pytest.approx(0.0, abs=1e-5)
        assert row.bias_method == pytest.approx(0.0, abs=1e-5)

    def test_frame_columns(self):
        frame = rows_to_frame([run_scenario(small(n_runs=3, bootstrap_replicates=0))])
        assert list(frame.columns) == TABLE_COLUMNS
        assert frame.loc[0, "b"] == 0.3


class TestMethodComparison:
    def test_single_run_has_one_row_per_method(self):
        frame = run_method_comparison(small(n_runs=1))
        assert list(frame.columns) == COMPARISON_COLUMNS
        assert sorted(frame["method"]) == ["empirical_likelihood", "entropy", "stable"]
        assert frame["error"].notna().all()

    def test_methods_share_trial_draws(self):
        config = small(n_runs=3)
        both = run_method_comparison(config, ["entropy", "el"])
        entropy_only = run_method_comparison(config, ["entropy"])
        np.testing.assert_array_equal(both[both["method"] == "entropy"]["error"].to_numpy(),
                                      entropy_only["error"].to_numpy())


class TestBatchProcessor:
    def test_order_and_failures(self):
        processor = BatchProcessor(max_workers=4)
        for i in range(10):
            processor.add_task(SimulationTask(i))

        def runner(task):
            if task.task_id == 3:
                raise ValueError("boom")
            return task.task_id ** 2

        done = processor.process_batch(runner)
        assert [t.task_id for t in done] == list(range(10))
        assert done[3].status is TaskStatus.FAILED and done[3].error == "boom"
        assert done[4].result == 16
        assert processor.process_batch(runner) == []

    def test_task_timing(self):
        task = SimulationTask(0)
        assert task.status is TaskStatus.PENDING
        assert task.get_duration() == 0.0
        processor = BatchProcessor()
        processor.add_task(task)
        done = processor.process_batch(lambda t: None)
        assert done[0].status is TaskStatus.COMPLETED
        assert done[0].completed_at >= done[0].started_at
        assert done[0].get_duration() >= 0.0


@pytest.mark.slow
class TestFullSizeScenarios:
    """2000-run scenarios checked against known summary values"""

    def test_both_correct_n500(self):
        row = run_scenario(ScenarioConfig.shifted(500, 0.5, 3, bootstrap_replicates=0), SimulationSettings(threads=4))
        assert abs(row.bias_method) <= 0.005
        assert row.se_2s == pytest.approx(0.032, abs=0.004)
        assert row.se_maic == pytest.approx(0.054, abs=0.006)
        assert row.se_empirical == pytest.approx(0.034, abs=0.004)
        assert row.coverage_2s == pytest.approx(0.929, abs=0.02)

    def test_bootstrap_n500(self):
        row = run_scenario(ScenarioConfig.shifted(500, 0.5, 3, n_runs=500), SimulationSettings(threads=4))
        assert row.se_boot == pytest.approx(0.033, abs=0.004)
        assert row.coverage_boot == pytest.approx(0.922, abs=0.03)

    def test_both_correct_n1000_coverage(self):
        row = run_scenario(ScenarioConfig.shifted(1000, 0.5, 3, bootstrap_replicates=0), SimulationSettings(threads=4))
        assert row.coverage_2s == pytest.approx(0.939, abs=0.02)

    def test_outcome_model_wrong(self):
        p3 = run_scenario(ScenarioConfig.shifted(500, 0.5, 3, ModelBlock.Y_INCORRECT, bootstrap_replicates=0),
                          SimulationSettings(threads=4))
        assert p3.bias_unadjusted == pytest.approx(0.307, abs=0.02)
        assert abs(p3.bias_method) <= 0.01
        p7 = run_scenario(ScenarioConfig.shifted(500, 0.5, 7, ModelBlock.Y_INCORRECT, bootstrap_replicates=0),
                          SimulationSettings(threads=4))
        assert p7.coverage_2s == pytest.approx(0.774, abs=0.03)

    def test_mixed_means_p7(self):
        row = run_scenario(ScenarioConfig.mixed(500, 7, bootstrap_replicates=0), SimulationSettings(threads=4))
        assert row.coverage_2s == pytest.approx(0.927, abs=0.02)
        assert row.se_empirical == pytest.approx(0.035, abs=0.005)

    def test_empirical_se_grows_with_shift(self):
        rows = [run_scenario(ScenarioConfig.shifted(500, b, 3, n_runs=500, bootstrap_replicates=0),
                             SimulationSettings(threads=4)) for b in (0.25, 0.5, 0.75)]
        se = [r.se_empirical for r in rows]
        assert se[0] < se[1] < se[2]

    def test_empirical_se_grows_with_dimension(self):
        rows = [run_scenario(ScenarioConfig.shifted(500, 0.5, p, n_runs=500, bootstrap_replicates=0),
                             SimulationSettings(threads=4)) for p in (3, 5, 7)]
        se = [r.se_empirical for r in rows]
        assert se[0] < se[1] < se[2]

    def test_method_errors(self):
        frame = run_method_comparison(ScenarioConfig.shifted(200, 0.5, 7, ModelBlock.Y_INCORRECT, n_runs=1000),
                                      settings=SimulationSettings(threads=4))
        errors = frame.groupby("method")["error"]
        means, spread = errors.mean(), errors.std()
        assert abs(means["entropy"]) < 0.02
        assert np.sign(means["stable"]) != np.sign(means["empirical_likelihood"])
        assert spread["empirical_likelihood"] >= 1.25 * spread["entropy"]
