"""
Input parsing and result writers

Individual data is a comma-separated CSV with a header row. Target summaries
are JSON objects validated by `TargetSummaryFile`. Scenario files are JSON or
TOML validated by `ScenarioFile`.
"""

import os
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from pycalibra.calibration import CovariateMatrix, TargetSummary
from pycalibra.exceptions import CalibraError, InputParseError
from pycalibra.util import to_jsonable

from .core_types import SimulationDefaults
from .simulation import ScenarioConfig, mixed_means, builtin_grid

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"


class TargetSummaryFile(BaseModel):
    """Aggregate statistics of the target population"""

    model_config = ConfigDict(extra="forbid")

    means: List[float] = Field(min_length=1)
    n0: int | None = Field(default=None, gt=0)
    ybar0: float | None = None
    sigma0_sq: float | None = Field(default=None, ge=0)
    mu02: float | None = None
    names: List[str] | None = None

    @model_validator(mode="after")
    def _names_match_means(self) -> "TargetSummaryFile":
        if self.names is not None and len(self.names) != len(self.means):
            raise ValueError(f"{len(self.names)} names for {len(self.means)} means")
        return self

    def to_summary(self) -> TargetSummary:
        return TargetSummary(xbar0=np.asarray(self.means, dtype=float), n0=self.n0, ybar0=self.ybar0,
                             sigma0_sq=self.sigma0_sq, mu02=self.mu02,
                             names=None if self.names is None else tuple(self.names))


class ScenarioEntry(BaseModel):
    """One simulation scenario; `m` overrides `b` (and `mixed`)"""

    model_config = ConfigDict(extra="forbid")

    n1: int = Field(gt=0)
    p: int = Field(gt=0)
    b: float | None = None
    m: List[float] | None = None
    mixed: bool = False
    beta: float | None = None
    n0: int | None = Field(default=None, gt=0)
    sigma_eps: float | None = Field(default=None, gt=0)
    threshold_noise: float | None = Field(default=None, ge=0)
    y_model: Literal["linear", "threshold"] = "linear"
    p_model: Literal["normal", "lognormal"] = "normal"
    n_runs: int | None = Field(default=None, gt=0)
    bootstrap_replicates: int | None = Field(default=None, ge=0)
    kind: Literal["table", "comparison"] = "table"

    @model_validator(mode="after")
    def _means_defined(self) -> "ScenarioEntry":
        if self.m is None and self.b is None and not self.mixed:
            raise ValueError("one of m, b or mixed=true is required")
        if self.m is not None and len(self.m) != self.p:
            raise ValueError(f"m has {len(self.m)} entries for p={self.p}")
        if self.bootstrap_replicates == 1:
            raise ValueError("bootstrap_replicates must be 0 or >= 2")
        return self

    def to_config(self, defaults: SimulationDefaults, seed: int, n_runs: int | None) -> ScenarioConfig:
        if self.m is not None:
            m = tuple(self.m)
        elif self.mixed:
            m = mixed_means(self.p)
        else:
            m = (self.b,) * self.p
        runs = self.n_runs or n_runs or (defaults.comparison_runs if self.kind == "comparison" else defaults.n_runs)
        return ScenarioConfig(
            n1=self.n1, p=self.p, m=m, b=self.b if self.m is None and not self.mixed else None,
            beta=defaults.beta if self.beta is None else self.beta,
            n0=self.n0 or defaults.n0,
            sigma_eps=self.sigma_eps or defaults.sigma_eps,
            threshold_noise=defaults.threshold_noise if self.threshold_noise is None else self.threshold_noise,
            y_model=self.y_model, p_model=self.p_model, n_runs=runs,
            bootstrap_replicates=defaults.bootstrap_replicates if self.bootstrap_replicates is None
            else self.bootstrap_replicates,
            seed=seed,
        )


class ScenarioFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grids: List[Literal["shift", "mixed", "methods"]] = Field(default_factory=list)
    scenarios: List[ScenarioEntry] = Field(default_factory=list)
    n_runs: int | None = Field(default=None, gt=0)
    """overrides every grid's and scenario's run count"""
    seed: int | None = Field(default=None, ge=0)
    methods: List[Literal["entropy", "stable", "empirical_likelihood"]] = Field(
        default_factory=lambda: ["entropy", "stable", "empirical_likelihood"])
    tolerance_d: float | None = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _not_empty(self) -> "ScenarioFile":
        if not self.grids and not self.scenarios:
            raise ValueError("a scenario file needs at least one grid or scenario")
        return self


@dataclass
class ScenarioPlan:
    """Scenario files resolved into runnable configs, grouped by output table"""

    tables: Dict[str, List[ScenarioConfig]] = field(default_factory=dict)
    comparisons: Dict[str, List[ScenarioConfig]] = field(default_factory=dict)
    methods: List[str] = field(default_factory=list)
    tolerance_d: float = SimulationDefaults.tolerance_d


def _parse_error(path: str, e: Exception) -> InputParseError:
    line = getattr(e, "lineno", None)
    return InputParseError(f"{os.path.basename(path)}: {e}", line)


def _load_document(path: str) -> Any:
    try:
        if path.lower().endswith(".toml"):
            with open(path, "rb") as f:
                return tomllib.load(f)
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise InputParseError(f"file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise _parse_error(path, e) from e
    except tomllib.TOMLDecodeError as e:
        raise _parse_error(path, e) from e


def read_target_summary(path: str) -> TargetSummary:
    """Parse a target summary JSON file

    Raises:
        InputParseError: malformed JSON or a schema violation
    """
    document = _load_document(path)
    try:
        summary = TargetSummaryFile.model_validate(document).to_summary()
    except ValidationError as e:
        raise InputParseError(f"{os.path.basename(path)}: {e}") from e
    except CalibraError as e:
        raise InputParseError(f"{os.path.basename(path)}: {e}") from e
    logger.info(f"[FileIO] target summary with {summary.xbar0.size} means from {path}")
    return summary


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna().to_numpy()
    if bad.any():
        row = int(np.argmax(bad))
        # header is line 1
        raise InputParseError(f"column '{column}' has a missing or non-numeric value "
                              f"{frame[column].iloc[row]!r}", line=row + 2)
    return values.to_numpy(dtype=float)


def read_ipd_csv(path: str, target: TargetSummary, outcome: str = "y", arm: str | None = None,
                 covariates: Sequence[str] | None = None) -> CovariateMatrix:
    """Read individual data and pick the covariate columns

    Covariates are matched to the target means by name when the target has
    names (or `covariates` is given), otherwise by position over every column
    that is not the outcome or the arm. A mismatch is an error.

    Raises:
        InputParseError: unreadable CSV, unknown columns, non-numeric cells
    """
    try:
        frame = pd.read_csv(path, sep=",", decimal=".", encoding="utf-8", dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise InputParseError(f"file not found: {path}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputParseError(f"{os.path.basename(path)}: {e}") from e
    frame.columns = [str(c).strip() for c in frame.columns]

    reserved = [c for c in (outcome, arm) if c]
    missing = [c for c in reserved if c not in frame.columns]
    if missing:
        raise InputParseError(f"{os.path.basename(path)}: missing column(s) {missing}", line=1)

    names = list(covariates) if covariates else (list(target.names) if target.names else None)
    if names is not None:
        unknown = [c for c in names if c not in frame.columns]
        if unknown:
            raise InputParseError(f"{os.path.basename(path)}: covariate column(s) {unknown} not in header", line=1)
    else:
        names = [c for c in frame.columns if c not in reserved]
    if len(names) != target.xbar0.size:
        raise InputParseError(f"{os.path.basename(path)}: {len(names)} covariate columns for "
                              f"{target.xbar0.size} target means", line=1)

    x = np.column_stack([_numeric_column(frame, c) for c in names]) if names else np.empty((len(frame), 0))
    y = _numeric_column(frame, outcome)
    arms = None
    if arm:
        arms = _numeric_column(frame, arm)
    try:
        data = CovariateMatrix(x, y, arms, tuple(names))
    except CalibraError as e:
        raise InputParseError(f"{os.path.basename(path)}: {e}") from e
    logger.info(f"[FileIO] read {data.n} rows x {data.p} covariates from {path}")
    return data


def load_scenarios(path: str, defaults: SimulationDefaults, seed: int, n_runs: int | None = None) -> ScenarioPlan:
    """Parse a JSON or TOML scenario file

    Raises:
        InputParseError: malformed document, unknown keys or invalid enum values
    """
    document = _load_document(path)
    try:
        parsed = ScenarioFile.model_validate(document)
    except ValidationError as e:
        raise InputParseError(f"{os.path.basename(path)}: {e}") from e
    seed = parsed.seed if parsed.seed is not None else seed
    n_runs = n_runs or parsed.n_runs
    plan = ScenarioPlan(methods=list(parsed.methods),
                        tolerance_d=defaults.tolerance_d if parsed.tolerance_d is None else parsed.tolerance_d)
    for grid in parsed.grids:
        configs = builtin_grid(grid, defaults, seed=seed, n_runs=n_runs)
        (plan.comparisons if grid == "methods" else plan.tables)[grid] = configs
    try:
        for entry in parsed.scenarios:
            config = entry.to_config(defaults, seed, n_runs)
            if entry.kind == "comparison":
                plan.comparisons.setdefault("comparison", []).append(config)
            else:
                plan.tables.setdefault("scenarios", []).append(config)
    except CalibraError as e:
        raise InputParseError(f"{os.path.basename(path)}: {e}") from e
    return plan


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_weights_csv(path: str, weights: np.ndarray) -> None:
    """Columns row_id (1-based data row) and weight, full precision"""
    _ensure_parent(path)
    frame = pd.DataFrame({"row_id": np.arange(1, len(weights) + 1), "weight": np.asarray(weights, dtype=float)})
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    logger.info(f"[FileIO] wrote {len(weights)} weights to {path}")


def read_weights_csv(path: str) -> np.ndarray:
    try:
        frame = pd.read_csv(path)
    except (FileNotFoundError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputParseError(f"{os.path.basename(path)}: {e}") from e
    if "weight" not in frame.columns:
        raise InputParseError(f"{os.path.basename(path)}: no 'weight' column", line=1)
    return frame.sort_values("row_id")["weight"].to_numpy(dtype=float) if "row_id" in frame.columns \
        else frame["weight"].to_numpy(dtype=float)


def write_json(path: str, payload: Any) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(payload), f, ensure_ascii=False, indent=2)
    logger.info(f"[FileIO] wrote {path}")


def write_table_csv(path: str, frame: pd.DataFrame) -> None:
    _ensure_parent(path)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, na_rep="")
    logger.info(f"[FileIO] wrote {len(frame)} rows to {path}")


