import json

import numpy as np
import pytest

from module.core_types import SimulationDefaults
from module.file_io import (load_scenarios, read_ipd_csv, read_target_summary, read_weights_csv, write_json,
                            write_weights_csv)
from pycalibra.calibration import TargetSummary
from pycalibra.exceptions import InputParseError


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestTargetSummary:
    def test_full_summary(self, tmp_path):
        path = write(tmp_path / "t.json", json.dumps(
            {"means": [0.1, 0.2], "n0": 2000, "ybar0": 0.4, "sigma0_sq": 1.0, "mu02": 0.1, "names": ["age", "bmi"]}))
        target = read_target_summary(path)
        np.testing.assert_array_equal(target.xbar0, [0.1, 0.2])
        assert (target.n0, target.ybar0, target.sigma0_sq, target.mu02) == (2000, 0.4, 1.0, 0.1)
        assert target.names == ("age", "bmi")

    @pytest.mark.parametrize("document", ['{"means": []}', '{"means": [0.1], "extra": 1}',
                                          '{"means": [0.1], "names": ["a", "b"]}',
                                          '{"means": [0.1], "sigma0_sq": -1}', '{"means": [0.1,'])
    def test_rejected(self, tmp_path, document):
        with pytest.raises(InputParseError):
            read_target_summary(write(tmp_path / "t.json", document))

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputParseError):
            read_target_summary(str(tmp_path / "absent.json"))


class TestIndividualData:
    def test_positional_columns(self, tmp_path):
        path = write(tmp_path / "ipd.csv", "x1,x2,y\n0,1,5\n1,0,6\n2,2,7\n")
        data = read_ipd_csv(path, TargetSummary([0.5, 0.5]))
        assert data.names == ("x1", "x2")
        np.testing.assert_array_equal(data.y, [5.0, 6.0, 7.0])

    def test_columns_matched_by_name(self, tmp_path):
        path = write(tmp_path / "ipd.csv", "bmi,y,age,trt\n1,5,30,1\n2,6,40,0\n3,7,35,1\n")
        target = TargetSummary([36.0, 2.0], names=("age", "bmi"))
        data = read_ipd_csv(path, target, arm="trt")
        np.testing.assert_array_equal(data.x[:, 0], [30.0, 40.0, 35.0])
        assert data.arm.tolist() == [1, 0, 1]

    def test_non_numeric_cell_reports_line(self, tmp_path):
        path = write(tmp_path / "ipd.csv", "x,y\n0,1\nfoo,3\n1,2\n")
        with pytest.raises(InputParseError) as excinfo:
            read_ipd_csv(path, TargetSummary([0.5]))
        assert excinfo.value.line == 3

    def test_missing_outcome(self, tmp_path):
        path = write(tmp_path / "ipd.csv", "x,z\n0,1\n1,2\n")
        with pytest.raises(InputParseError):
            read_ipd_csv(path, TargetSummary([0.5]))

    def test_covariate_count_mismatch(self, tmp_path):
        path = write(tmp_path / "ipd.csv", "x1,x2,y\n0,1,5\n1,0,6\n2,2,7\n")
        with pytest.raises(InputParseError):
            read_ipd_csv(path, TargetSummary([0.5]))


class TestWriters:
    def test_weights_round_trip(self, tmp_path, rng):
        weights = rng.dirichlet(np.ones(40))
        path = str(tmp_path / "out" / "w.csv")
        write_weights_csv(path, weights)
        assert np.max(np.abs(read_weights_csv(path) - weights)) <= 1e-12
        assert (tmp_path / "out" / "w.csv").read_text().splitlines()[0] == "row_id,weight"

    def test_json_is_strict(self, tmp_path):
        path = str(tmp_path / "r.json")
        write_json(path, {"value": float("nan"), "arr": np.arange(3)})
        assert json.loads((tmp_path / "r.json").read_text()) == {"value": None, "arr": [0, 1, 2]}


class TestScenarioFiles:
    def test_toml(self, tmp_path):
        path = write(tmp_path / "s.toml", """
seed = 9
n_runs = 3
grids = ["shift"]

[[scenarios]]
n1 = 80
p = 2
b = 0.4
y_model = "threshold"

[[scenarios]]
n1 = 80
p = 3
mixed = true
kind = "comparison"
""")
        plan = load_scenarios(path, SimulationDefaults(), seed=1)
        assert len(plan.tables["shift"]) == 8 * 3
        custom = plan.tables["scenarios"][0]
        assert (custom.n1, custom.m, custom.seed, custom.n_runs) == (80, (0.4, 0.4), 9, 3)
        assert plan.comparisons["comparison"][0].m == (0.5, 0.5, 0.25)

    @pytest.mark.parametrize("document", ['{}', '{"grids": ["table9"]}', '{"scenarios": [{"n1": 10, "p": 2}]}',
                                          '{"scenarios": [{"n1": 10, "p": 1, "b": 0.1, "y_model": "probit"}]}',
                                          '{"scenarios": [{"n1": 10, "p": 1, "b": 0.1, "bootstrap_replicates": 1}]}',
                                          '{"scenarios": [{"n1": 10, "p": 1, "b": 0.1, "threshold_noise": -0.5}]}'])
    def test_rejected(self, tmp_path, document):
        with pytest.raises(InputParseError):
            load_scenarios(write(tmp_path / "s.json", document), SimulationDefaults(), seed=1)

    def test_outcome_noise_defaults_and_overrides(self, tmp_path):
        path = write(tmp_path / "s.json", json.dumps({"scenarios": [
            {"n1": 50, "p": 2, "b": 0.5, "y_model": "threshold"},
            {"n1": 50, "p": 2, "b": 0.5, "y_model": "threshold", "threshold_noise": 0.3, "sigma_eps": 1.0},
        ]}))
        default, custom = load_scenarios(path, SimulationDefaults(), seed=1).tables["scenarios"]
        assert (default.sigma_eps, default.threshold_noise) == (0.5, 0.0)
        assert (custom.sigma_eps, custom.threshold_noise) == (1.0, 0.3)
