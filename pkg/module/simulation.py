"""
Monte Carlo study of calibration-weighted estimators

A scenario fixes the target population once (one draw of n0 units), then
repeats: draw a trial, fit entropy weights, estimate mu1 and its variance by
the two-step sandwich, the bootstrap and the naive sandwich. Coverage counts
runs with |mu1 - estimate| < 1.96 SE.

Random streams: scenario seed -> child 0 for the target, child 1 -> child r
for run r (trial draw on its child 0, bootstrap on its child 1). Results are
therefore identical for any thread count.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Any

import numpy as np
import pandas as pd
from scipy.stats import norm

from pycalibra.calibration import CalibrationProblem, CovariateMatrix, Method, TargetSummary, calibrate
from pycalibra.estimators import EstimandSpec, weighted_mu1
from pycalibra.exceptions import BootstrapFailedError, CalibraError, DomainError
from pycalibra.numkit import OptimControl, RngStream
from pycalibra import variance

from .core_task import BatchProcessor, SimulationTask
from .core_types import ModelBlock, PModel, SimulationDefaults, TaskStatus, YModel

logger = logging.getLogger(__name__)

COVERAGE_Z = 1.96

TABLE_COLUMNS = ["block", "n1", "beta", "b", "p", "bias_unadj", "bias_maic", "cov_2s", "cov_boot",
                 "se_2s", "se_boot", "se_maic", "se_emp", "solver_failures", "bootstrap_failures", "degenerate"]
COMPARISON_COLUMNS = ["run", "method", "scenario", "error"]


def mixed_means(p: int, high: float = 0.5, low: float = 0.25, n_high: int = 2) -> Tuple[float, ...]:
    """First `n_high` trial covariate means at `high`, the rest at `low`"""
    return tuple(high if j < n_high else low for j in range(p))


@dataclass(frozen=True)
class ScenarioConfig:
    n1: int
    p: int
    m: Tuple[float, ...]
    """trial covariate means (target means are 0)"""
    beta: float = 0.3
    n0: int = 2000
    sigma_eps: float = 0.5
    """error SD of the linear outcome"""
    threshold_noise: float = 0.0
    """SD of the latent error inside the threshold outcome; 0 makes it a deterministic step"""
    y_model: YModel = YModel.LINEAR
    p_model: PModel = PModel.NORMAL
    n_runs: int = 2000
    bootstrap_replicates: int = 50
    """0 skips the bootstrap"""
    seed: int = 134
    b: float | None = None
    """common mean shift when m = b * 1, echoed in tables"""

    def __post_init__(self):
        object.__setattr__(self, "y_model", YModel.from_name(self.y_model))
        object.__setattr__(self, "p_model", PModel.from_name(self.p_model))
        object.__setattr__(self, "m", tuple(float(v) for v in self.m))
        for name in ("n1", "n0", "p", "n_runs"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.m) != self.p:
            raise DomainError(f"m has {len(self.m)} entries for p={self.p}")
        if not self.sigma_eps > 0:
            raise DomainError(f"sigma_eps must be positive, got {self.sigma_eps}")
        if not self.threshold_noise >= 0:
            raise DomainError(f"threshold_noise must be >= 0, got {self.threshold_noise}")
        if int(self.bootstrap_replicates) < 0 or int(self.bootstrap_replicates) == 1:
            raise DomainError(f"bootstrap_replicates must be 0 or >= 2, got {self.bootstrap_replicates}")

    @classmethod
    def shifted(cls, n1: int, b: float, p: int, block: ModelBlock = ModelBlock.BOTH_CORRECT, **kwargs) -> "ScenarioConfig":
        """Trial means b * 1_p"""
        return cls(n1=n1, p=p, m=(b,) * p, b=b, y_model=block.y_model, p_model=block.p_model, **kwargs)

    @classmethod
    def mixed(cls, n1: int, p: int, block: ModelBlock = ModelBlock.BOTH_CORRECT, **kwargs) -> "ScenarioConfig":
        return cls(n1=n1, p=p, m=mixed_means(p), y_model=block.y_model, p_model=block.p_model, **kwargs)

    @property
    def block(self) -> str:
        for blk in ModelBlock:
            if blk.y_model is self.y_model and blk.p_model is self.p_model:
                return blk.value
        return "both_incorrect"

    @property
    def label(self) -> str:
        y = "W" if self.y_model is YModel.THRESHOLD else "R"
        pm = "W" if self.p_model is PModel.LOGNORMAL else "R"
        shift = f"b={self.b:g}" if self.b is not None else "m=" + "/".join(f"{v:g}" for v in self.m)
        return f"Y:{y},P:{pm} n1={self.n1} {shift} p={self.p}"

    @property
    def coefficients(self) -> np.ndarray:
        return np.full(self.p, float(self.beta))


@dataclass(frozen=True)
class ScenarioTruth:
    xbar0: np.ndarray
    mu1_true: float


@dataclass
class SimRow:
    """Summary of one scenario over its runs"""

    config: ScenarioConfig
    bias_unadjusted: float
    bias_method: float
    coverage_2s: float
    coverage_boot: float
    se_2s: float
    se_boot: float
    se_maic: float
    se_empirical: float
    solver_failures: int = 0
    bootstrap_failures: int = 0
    degenerate: bool = False

    def to_record(self) -> Dict[str, Any]:
        c = self.config
        return {
            "block": c.block, "n1": c.n1, "beta": c.beta, "b": c.b, "p": c.p,
            "bias_unadj": self.bias_unadjusted, "bias_maic": self.bias_method,
            "cov_2s": self.coverage_2s, "cov_boot": self.coverage_boot,
            "se_2s": self.se_2s, "se_boot": self.se_boot, "se_maic": self.se_maic, "se_emp": self.se_empirical,
            "solver_failures": self.solver_failures, "bootstrap_failures": self.bootstrap_failures,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class _RunOutcome:
    estimate: float
    unadjusted: float
    v2s: float
    v_boot: float
    """nan when the bootstrap was skipped or failed"""
    v0: float
    bootstrap_failures: int


@dataclass
class SimulationSettings:
    """Solver and execution settings shared by every scenario"""

    control: OptimControl = field(default_factory=OptimControl)
    bootstrap_control: OptimControl = variance.BOOTSTRAP_CONTROL
    threads: int = 1
    degenerate_failure_rate: float = SimulationDefaults.degenerate_failure_rate


def _covariates(z: np.ndarray, p_model: PModel) -> np.ndarray:
    return np.exp(0.5 * z) if p_model is PModel.LOGNORMAL else z


def _threshold_mean(lin: np.ndarray, noise: float) -> float:
    """Mean of I(lin + e > 0) over the target sample, e ~ N(0, noise^2)"""
    if noise == 0:
        return float(np.mean(lin > 0))
    return float(np.mean(norm.cdf(lin / noise)))


def generate_target(config: ScenarioConfig, rng: RngStream) -> ScenarioTruth:
    """Draw the fixed target sample and its true mean outcome under treatment 1"""
    gen = rng.generator()
    x0 = _covariates(gen.standard_normal((config.n0, config.p)), config.p_model)
    lin = x0 @ config.coefficients
    if config.y_model is YModel.THRESHOLD:
        mu1 = _threshold_mean(lin, config.threshold_noise)
    else:
        mu1 = float(np.mean(lin))
    return ScenarioTruth(xbar0=x0.mean(axis=0), mu1_true=mu1)


def generate_trial(config: ScenarioConfig, truth: ScenarioTruth, rng: RngStream) -> CovariateMatrix:
    gen = rng.generator()
    z = gen.standard_normal((config.n1, config.p)) + np.asarray(config.m)
    x = _covariates(z, config.p_model)
    noise = gen.standard_normal(config.n1)
    lin = x @ config.coefficients
    if config.y_model is YModel.THRESHOLD:
        y = (lin + config.threshold_noise * noise > 0).astype(float)
    else:
        y = lin + config.sigma_eps * noise
    return CovariateMatrix(x, y)


def _run_stream(config: ScenarioConfig, run: int) -> RngStream:
    return RngStream(config.seed).child(1).child(run)


def _truth(config: ScenarioConfig) -> ScenarioTruth:
    return generate_target(config, RngStream(config.seed).child(0))


def _one_run(config: ScenarioConfig, truth: ScenarioTruth, run: int, settings: SimulationSettings) -> _RunOutcome:
    stream = _run_stream(config, run)
    data = generate_trial(config, truth, stream.child(0))
    problem = CalibrationProblem(data, TargetSummary(truth.xbar0), Method.entropy, control=settings.control)
    solution = calibrate(problem)
    est = weighted_mu1(data, solution)
    v2s = variance.v_2s(data, solution, problem.target, est)
    v_boot, boot_failures = float("nan"), 0
    if config.bootstrap_replicates >= 2:
        spec = variance.BootstrapSpec(replicates=config.bootstrap_replicates, rng=stream.child(1),
                                      control=settings.bootstrap_control)
        try:
            v_boot, boot_failures = variance.bootstrap_variance(data, problem, EstimandSpec(), spec)
        except BootstrapFailedError:
            boot_failures = config.bootstrap_replicates
    return _RunOutcome(estimate=est, unadjusted=float(data.y.mean()), v2s=v2s, v_boot=v_boot,
                       v0=variance.v0(data, solution, est), bootstrap_failures=boot_failures)


def _nan_safe_sqrt_mean(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    return float(np.sqrt(finite.mean())) if finite.size else float("nan")


def run_scenario(config: ScenarioConfig, settings: SimulationSettings | None = None) -> SimRow:
    """Run every Monte Carlo replicate of one scenario and summarize"""
    settings = settings or SimulationSettings()
    truth = _truth(config)

    processor = BatchProcessor(max_workers=settings.threads)
    for run in range(config.n_runs):
        processor.add_task(SimulationTask(run))
    tasks = processor.process_batch(lambda task: _one_run(config, truth, task.task_id, settings))

    outcomes: List[_RunOutcome] = [t.result for t in tasks if t.status is TaskStatus.COMPLETED]
    solver_failures = len(tasks) - len(outcomes)
    degenerate = solver_failures > settings.degenerate_failure_rate * config.n_runs
    if degenerate:
        logger.warning(f"[SimulationRunner] {config.label}: {solver_failures} of {config.n_runs} runs failed "
                       f"to calibrate; scenario flagged degenerate")
    if not outcomes:
        nan = float("nan")
        return SimRow(config, nan, nan, nan, nan, nan, nan, nan, nan, solver_failures, 0, True)

    est = np.array([o.estimate for o in outcomes])
    v2s = np.array([o.v2s for o in outcomes])
    v_boot = np.array([o.v_boot for o in outcomes])
    v0 = np.array([o.v0 for o in outcomes])
    err = est - truth.mu1_true
    boot_ok = np.isfinite(v_boot)

    row = SimRow(
        config=config,
        bias_unadjusted=float(np.mean([o.unadjusted for o in outcomes]) - truth.mu1_true),
        bias_method=float(err.mean()),
        coverage_2s=float(np.mean(np.abs(err) < COVERAGE_Z * np.sqrt(v2s))),
        coverage_boot=float(np.mean(np.abs(err[boot_ok]) < COVERAGE_Z * np.sqrt(v_boot[boot_ok])))
        if boot_ok.any() else float("nan"),
        se_2s=_nan_safe_sqrt_mean(v2s),
        se_boot=_nan_safe_sqrt_mean(v_boot),
        se_maic=_nan_safe_sqrt_mean(v0),
        se_empirical=float(np.std(est, ddof=1)) if est.size > 1 else float("nan"),
        solver_failures=solver_failures,
        bootstrap_failures=int(sum(o.bootstrap_failures for o in outcomes)),
        degenerate=degenerate,
    )
    logger.info(f"[SimulationRunner] {config.label}: bias {row.bias_method:.4f}, se_2s {row.se_2s:.4f}, "
                f"se_emp {row.se_empirical:.4f}, cov_2s {row.coverage_2s:.3f}")
    return row


def run_grid(configs: Sequence[ScenarioConfig], settings: SimulationSettings | None = None) -> List[SimRow]:
    return [run_scenario(c, settings) for c in configs]


def rows_to_frame(rows: Sequence[SimRow]) -> pd.DataFrame:
    return pd.DataFrame([r.to_record() for r in rows], columns=TABLE_COLUMNS)


def run_method_comparison(config: ScenarioConfig, methods: Sequence[Method | str] = tuple(Method),
                          d: float | Sequence[float] = SimulationDefaults.tolerance_d,
                          settings: SimulationSettings | None = None) -> pd.DataFrame:
    """Per-run error mu1_hat - mu1_true of each weighting method on shared trial draws

    A run where a method fails to calibrate keeps its row with a missing error.
    """
    settings = settings or SimulationSettings()
    methods = [Method.from_name(m) for m in methods]
    truth = _truth(config)
    target = TargetSummary(truth.xbar0)

    def run_methods(task: SimulationTask) -> List[float]:
        data = generate_trial(config, truth, _run_stream(config, task.task_id).child(0))
        errors = []
        for method in methods:
            tolerance = d if method is Method.stable else None
            try:
                solution = calibrate(CalibrationProblem(data, target, method, tolerance, settings.control))
                errors.append(weighted_mu1(data, solution) - truth.mu1_true)
            except CalibraError as e:
                logger.debug(f"[SimulationRunner] run {task.task_id} {method.value} failed: {e}")
                errors.append(float("nan"))
        return errors

    processor = BatchProcessor(max_workers=settings.threads)
    for run in range(config.n_runs):
        processor.add_task(SimulationTask(run))
    records = []
    for task in processor.process_batch(run_methods):
        errors = task.result if task.status is TaskStatus.COMPLETED else [float("nan")] * len(methods)
        for method, error in zip(methods, errors):
            records.append({"run": task.task_id, "method": method.value, "scenario": config.label, "error": error})
    frame = pd.DataFrame(records, columns=COMPARISON_COLUMNS)
    failed = int(frame["error"].isna().sum())
    if failed > settings.degenerate_failure_rate * len(frame):
        logger.warning(f"[SimulationRunner] {config.label}: {failed} of {len(frame)} method fits failed")
    return frame


_SHIFT_ROWS = [(100, 0.5, 3), (200, 0.5, 3), (500, 0.5, 3), (1000, 0.5, 3),
               (200, 0.25, 3), (500, 0.75, 3), (500, 0.5, 5), (500, 0.5, 7)]
_MIXED_ROWS = [(100, 3), (200, 3), (500, 3), (1000, 3), (500, 5), (500, 7)]
GRIDS = ("shift", "mixed", "methods")


def builtin_grid(name: str, defaults: SimulationDefaults | None = None, seed: int = 134,
                 n_runs: int | None = None) -> List[ScenarioConfig]:
    """Built-in scenario grids, repeated for each model block

    shift: m = b*1, eight rows per block; mixed: mean pattern 0.5, 0.5, 0.25, ...,
    six rows per block; methods: n1=200, p in {4, 7}, b in {0.25, 0.5}, with the
    comparison run count.
    """
    d = defaults or SimulationDefaults()
    common = dict(beta=d.beta, n0=d.n0, sigma_eps=d.sigma_eps, threshold_noise=d.threshold_noise,
                  bootstrap_replicates=d.bootstrap_replicates, seed=seed)
    key = name.strip().lower()
    configs: List[ScenarioConfig] = []
    for block in ModelBlock:
        if key == "shift":
            configs += [ScenarioConfig.shifted(n1, b, p, block, n_runs=n_runs or d.n_runs, **common)
                        for n1, b, p in _SHIFT_ROWS]
        elif key == "mixed":
            configs += [ScenarioConfig.mixed(n1, p, block, n_runs=n_runs or d.n_runs, **common)
                        for n1, p in _MIXED_ROWS]
        elif key == "methods":
            configs += [ScenarioConfig.shifted(200, b, p, block, n_runs=n_runs or d.comparison_runs, **common)
                        for p in (4, 7) for b in (0.25, 0.5)]
        else:
            raise DomainError(f"Unknown grid: {name} (expected one of {', '.join(GRIDS)})")
    return configs
