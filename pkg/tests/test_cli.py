"""End-to-end tests of the command-line entry point"""

import json

import numpy as np
import pandas as pd
import pytest

from calibra import EXIT_INFEASIBLE, EXIT_MISSING, EXIT_OK, EXIT_PARSE, main, parse_tolerance
from module.file_io import read_weights_csv
from pycalibra.exceptions import InputParseError

SCENARIOS = {
    "seed": 3,
    "n_runs": 2,
    "scenarios": [
        {"n1": 60, "p": 1, "b": 0.3, "bootstrap_replicates": 0},
        {"n1": 60, "p": 2, "b": 0.3, "kind": "comparison"},
    ],
}


@pytest.fixture
def files(tmp_path):
    ipd = tmp_path / "ipd.csv"
    ipd.write_text("x,y,trt\n0,1,1\n1,3,0\n", encoding="utf-8")
    target = tmp_path / "target.json"
    target.write_text(json.dumps({"means": [0.25], "ybar0": 1.0, "n0": 2000, "sigma0_sq": 1.0}), encoding="utf-8")
    scenarios = tmp_path / "scenarios.json"
    scenarios.write_text(json.dumps(SCENARIOS), encoding="utf-8")
    return tmp_path, str(ipd), str(target), str(scenarios)


class TestWeights:
    def test_entropy_weights(self, files):
        tmp, ipd, target, _ = files
        out = str(tmp / "w.csv")
        assert main(["weights", ipd, target, "--method", "maic", "--covariates", "x", "--out", out]) == EXIT_OK
        np.testing.assert_allclose(read_weights_csv(out), [0.75, 0.25], atol=1e-9)
        diagnostics = json.loads((tmp / "w.json").read_text())
        assert diagnostics["method"] == "entropy"
        assert diagnostics["ess"] == pytest.approx(1.6)

    def test_stable_weights_with_tolerance(self, files):
        tmp, ipd, target, _ = files
        out = str(tmp / "sbw.csv")
        assert main(["weights", ipd, target, "--method", "sbw", "--d", "0.5", "--covariates", "x",
                     "--out", out]) == EXIT_OK
        np.testing.assert_allclose(read_weights_csv(out), [0.5, 0.5], atol=1e-12)

    def test_outside_hull(self, files):
        tmp, ipd, _, _ = files
        far = tmp / "far.json"
        far.write_text('{"means": [5.0]}', encoding="utf-8")
        assert main(["weights", ipd, str(far), "--covariates", "x", "--out", str(tmp / "w.csv")]) == EXIT_INFEASIBLE

    def test_malformed_target(self, files):
        tmp, ipd, _, _ = files
        bad = tmp / "bad.json"
        bad.write_text('{"means": [0.25', encoding="utf-8")
        assert main(["weights", ipd, str(bad), "--out", str(tmp / "w.csv")]) == EXIT_PARSE

    def test_unknown_method(self, files):
        tmp, ipd, target, _ = files
        assert main(["weights", ipd, target, "--method", "raking", "--covariates", "x",
                     "--out", str(tmp / "w.csv")]) == EXIT_PARSE

    def test_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["weights"])
        assert excinfo.value.code == EXIT_PARSE


class TestEstimate:
    def test_unanchored_report(self, files):
        tmp, ipd, target, _ = files
        out = tmp / "report.json"
        assert main(["estimate", ipd, target, "--covariates", "x", "--estimand", "unanchored",
                     "--variance", "v0,v2s", "--out", str(out)]) == EXIT_OK
        report = json.loads(out.read_text())
        assert report["estimate"] == pytest.approx(0.5)
        assert report["se_by_method"]["v0"] == pytest.approx(np.sqrt(0.28125))
        assert report["se_augmented_by_method"]["v0"] == pytest.approx(np.sqrt(0.28125 + 1 / 2000))

    def test_written_weights_reproduce_estimate(self, files):
        tmp, ipd, target, _ = files
        main(["weights", ipd, target, "--covariates", "x", "--out", str(tmp / "w.csv")])
        main(["estimate", ipd, target, "--covariates", "x", "--variance", "v0", "--out", str(tmp / "r.json")])
        weights = read_weights_csv(str(tmp / "w.csv"))
        y = pd.read_csv(ipd)["y"].to_numpy(dtype=float)
        assert abs(weights @ y - json.loads((tmp / "r.json").read_text())["estimate"]) <= 1e-12

    def test_missing_outcome_summary(self, files):
        tmp, ipd, _, _ = files
        bare = tmp / "bare.json"
        bare.write_text('{"means": [0.25]}', encoding="utf-8")
        assert main(["estimate", ipd, str(bare), "--covariates", "x", "--estimand", "unanchored",
                     "--out", str(tmp / "r.json")]) == EXIT_MISSING

    def test_arm_estimand_needs_arm_column(self, files):
        tmp, ipd, target, _ = files
        assert main(["estimate", ipd, target, "--covariates", "x", "--estimand", "generalize",
                     "--out", str(tmp / "r.json")]) == EXIT_MISSING


class TestSimulate:
    def test_scenario_file(self, files):
        tmp, _, _, scenarios = files
        out = tmp / "results"
        assert main(["simulate", "--scenarios", scenarios, "--out", str(out)]) == EXIT_OK
        table = pd.read_csv(out / "scenarios.csv")
        assert len(table) == 1
        assert table.loc[0, "n1"] == 60
        comparison = pd.read_csv(out / "comparison.csv")
        assert len(comparison) == 2 * 3

    def test_repeat_runs_write_identical_tables(self, files):
        tmp, _, _, scenarios = files
        main(["simulate", "--scenarios", scenarios, "--out", str(tmp / "a")])
        main(["simulate", "--scenarios", scenarios, "--out", str(tmp / "b")])
        assert (tmp / "a" / "scenarios.csv").read_bytes() == (tmp / "b" / "scenarios.csv").read_bytes()

    def test_compare_methods_subset(self, files):
        tmp, _, _, scenarios = files
        out = tmp / "cmp"
        assert main(["compare", "--scenarios", scenarios, "--methods", "maic,sbw", "--out", str(out)]) == EXIT_OK
        frame = pd.read_csv(out / "comparison.csv")
        assert sorted(set(frame["method"])) == ["entropy", "stable"]
        assert len(frame) == 4

    def test_invalid_run_count(self, files):
        tmp, _, _, _ = files
        assert main(["simulate", "--grid", "shift", "--n-runs", "0", "--out", str(tmp)]) == EXIT_PARSE

    def test_invalid_scenario_file(self, files):
        tmp, _, _, _ = files
        bad = tmp / "bad.json"
        bad.write_text('{"scenarios": [{"n1": 10, "p": 1, "b": 0.1, "p_model": "gamma"}]}', encoding="utf-8")
        assert main(["simulate", "--scenarios", str(bad), "--out", str(tmp)]) == EXIT_PARSE


def test_parse_tolerance():
    assert parse_tolerance("0.005") == [0.005]
    assert parse_tolerance("0.01, 0.02") == [0.01, 0.02]
    assert parse_tolerance(None) is None
    with pytest.raises(InputParseError):
        parse_tolerance("small")
