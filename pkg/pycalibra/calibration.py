"""Calibration problems and balancing-weight solvers

Three distances are supported: entropy (entropy balancing, identical to MAIC
weights), quadratic with nonnegativity and balance tolerance (stable balancing
weights) and -log (empirical likelihood).

Sign convention: entropy weights are w_i proportional to exp(-gamma' x_i).
MAIC is often written with exp(+gamma' x_i); the two differ only in the sign
of gamma.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Any, Tuple

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp, softmax

from .exceptions import (CalibrationInfeasibleError, DimensionError, DomainError,
                         MissingSummaryError, QPInfeasibleError)
from .numkit import FloatArray, OptimControl, minimize_smooth, newton_system, solve_qp
from .util import export_attr_to_json

logger = logging.getLogger(__name__)

DUAL_NORM_LIMIT = 1e6
"""Dual parameters beyond this norm are read as a target outside the convex hull"""
BALANCE_FAILURE = 1e-6
"""Imbalance above which an unconverged solve counts as infeasible"""


class Method(Enum):
    """Calibration distance"""

    entropy = "entropy"
    """sum w log w; MAIC"""
    stable = "stable"
    """sum (w - 1/n)^2 with w >= 0 and |D| <= d"""
    empirical_likelihood = "empirical_likelihood"
    """-sum log w"""

    @staticmethod
    def from_name(name: "str | Method") -> "Method":
        """Resolve a method name or one of its CLI aliases (maic, sbw, el)"""
        if isinstance(name, Method):
            return name
        key = str(name).strip().lower()
        aliases = {"maic": "entropy", "sbw": "stable", "el": "empirical_likelihood", "qd": "stable"}
        key = aliases.get(key, key)
        for m in Method:
            if m.value == key:
                return m
        raise DomainError(f"Invalid calibration method: {name}")


def _as_float_array(values: npt.ArrayLike, ndim: int, name: str) -> FloatArray:
    arr = np.array(values, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class CovariateMatrix:
    """Individual data of the trial: covariates (no intercept column), outcome and optional arm labels"""

    x: FloatArray
    """n x p covariates"""
    y: FloatArray
    """outcome, length n"""
    arm: npt.NDArray[np.int64] | None = None
    """treatment label per row (1 = treatment of interest)"""
    names: Tuple[str, ...] | None = None
    """covariate column names, if known"""

    def __post_init__(self):
        x = _as_float_array(self.x, 2, "x")
        y = _as_float_array(self.y, 1, "y")
        n, p = x.shape
        if y.size != n:
            raise DimensionError(f"y has length {y.size}, expected {n}")
        if n < p + 1:
            raise DomainError(f"need at least p+1={p + 1} rows, got {n}")
        if np.any(np.ptp(x, axis=0) == 0):
            raise DomainError("covariate columns must have nonzero variance")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if self.arm is not None:
            arm = np.asarray(self.arm)
            if arm.shape != (n,):
                raise DimensionError(f"arm has shape {arm.shape}, expected ({n},)")
            if not np.all(np.equal(np.mod(arm, 1), 0)):
                raise DomainError("arm labels must be integers")
            object.__setattr__(self, "arm", arm.astype(np.int64))
        if self.names is not None:
            names = tuple(str(s) for s in self.names)
            if len(names) != p:
                raise DimensionError(f"{len(names)} names for {p} covariates")
            object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def take(self, rows: npt.ArrayLike) -> "CovariateMatrix":
        """Row subset or resample (rows may repeat)"""
        idx = np.asarray(rows, dtype=int)
        return CovariateMatrix(self.x[idx], self.y[idx],
                               None if self.arm is None else self.arm[idx], self.names)


@dataclass(frozen=True)
class TargetSummary:
    """Aggregate statistics of the population without individual data"""

    xbar0: FloatArray
    """covariate means"""
    n0: int | None = None
    ybar0: float | None = None
    """mean outcome (mu_00 in anchored comparisons)"""
    sigma0_sq: float | None = None
    """outcome variance"""
    mu02: float | None = None
    """mean outcome of the shared anchor arm"""
    names: Tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "xbar0", _as_float_array(np.atleast_1d(self.xbar0), 1, "xbar0"))
        if self.xbar0.size == 0:
            raise DomainError("target means must be nonempty")
        if self.n0 is not None and int(self.n0) < 1:
            raise DomainError(f"n0 must be positive, got {self.n0}")
        if self.sigma0_sq is not None and not self.sigma0_sq >= 0:
            raise DomainError(f"sigma0_sq must be nonnegative, got {self.sigma0_sq}")
        if self.names is not None:
            object.__setattr__(self, "names", tuple(str(s) for s in self.names))

    def require(self, *fields: str) -> Tuple[Any, ...]:
        """Return the named summaries, raising MissingSummaryError for the first absent one"""
        values = []
        for name in fields:
            value = getattr(self, name)
            if value is None:
                raise MissingSummaryError(f"target summary '{name}' is required")
            values.append(value)
        return tuple(values)


@dataclass(frozen=True)
class WeightSolution:
    """Balancing weights and solver diagnostics"""

    weights: FloatArray
    dual_params: FloatArray
    """gamma (entropy), lambda (empirical likelihood) or balance multipliers (stable), original covariate units"""
    method: Method
    tolerance_d: FloatArray
    converged: bool
    imbalance: FloatArray
    """D = sum w_i x_i - xbar0"""
    ess: float
    iterations: int = 0

    def export_json(self) -> Dict[str, Any]:
        data = export_attr_to_json(self, ["method", "dual_params", "tolerance_d", "converged",
                                          "imbalance", "ess", "iterations"])
        data["max_abs_imbalance"] = float(np.max(np.abs(self.imbalance)))
        return data


@dataclass(frozen=True)
class CalibrationProblem:
    """Trial data, target summary and solver settings"""

    data: CovariateMatrix
    target: TargetSummary
    method: Method = Method.entropy
    tolerance_d: FloatArray | float | None = None
    """balance slack per covariate; only meaningful for the stable method"""
    control: OptimControl = field(default_factory=OptimControl)

    def __post_init__(self):
        method = Method.from_name(self.method)
        object.__setattr__(self, "method", method)
        p = self.data.p
        if self.target.xbar0.size != p:
            raise DimensionError(f"target has {self.target.xbar0.size} means, data has {p} covariates")
        d = np.zeros(p) if self.tolerance_d is None else np.broadcast_to(
            np.asarray(self.tolerance_d, dtype=float), (p,)).copy()
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise DomainError("tolerance_d must be finite and nonnegative")
        if method is not Method.stable and np.any(d > 0):
            raise DomainError(f"balance tolerance is only allowed with the stable method, not {method.value}")
        object.__setattr__(self, "tolerance_d", d)

    def with_data(self, data: CovariateMatrix, control: OptimControl | None = None) -> "CalibrationProblem":
        return CalibrationProblem(data, self.target, self.method, self.tolerance_d, control or self.control)


class _Standardized:
    """Covariates centred at the target and scaled by the trial SDs"""

    def __init__(self, problem: CalibrationProblem):
        x = problem.data.x
        self.scale = x.std(axis=0)
        self.u = (x - problem.target.xbar0) / self.scale
        # gradient tolerances are stated in original units
        self.control = problem.control.scaled(1.0 / max(1.0, float(np.max(self.scale))))


def effective_sample_size(weights: npt.ArrayLike) -> float:
    """(sum w)^2 / sum w^2; equals n for uniform weights"""
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("weights must be finite and nonnegative")
    sq = float(w @ w)
    if sq == 0.0:
        raise DomainError("all weights are zero")
    return float(w.sum()) ** 2 / sq


def _finish(problem: CalibrationProblem, weights: FloatArray, dual: FloatArray,
            converged: bool, iterations: int) -> WeightSolution:
    imbalance = weights @ problem.data.x - problem.target.xbar0
    return WeightSolution(weights=weights, dual_params=dual, method=problem.method,
                          tolerance_d=problem.tolerance_d.copy(), converged=converged,
                          imbalance=imbalance, ess=effective_sample_size(weights), iterations=iterations)


def _check_divergence(name: str, dual: FloatArray, imbalance: FloatArray,
                      converged: bool, control: OptimControl) -> None:
    worst = float(np.max(np.abs(imbalance)))
    if np.linalg.norm(dual) > DUAL_NORM_LIMIT:
        raise CalibrationInfeasibleError(
            f"{name}: dual parameters diverged (|dual|={np.linalg.norm(dual):.3g}); "
            f"target means are likely outside the convex hull of the data", imbalance)
    if not converged and worst > max(BALANCE_FAILURE, 10 * control.gradient_tolerance):
        raise CalibrationInfeasibleError(
            f"{name}: no balancing solution within {control.max_iterations} iterations "
            f"(max |D|={worst:.3g})", imbalance)


def solve_entropy(problem: CalibrationProblem) -> WeightSolution:
    """Entropy balancing (MAIC) weights through the dual

    Minimizes log(sum exp(-gamma' (x_i - xbar0))) by BFGS; the weights are the
    softmax of -gamma' x_i.

    Raises:
        CalibrationInfeasibleError: the dual diverged or the iteration cap was
            hit with imbalance above tolerance.
    """
    std = _Standardized(problem)
    u = std.u

    def objective(gamma: FloatArray) -> float:
        return float(logsumexp(-u @ gamma))

    def gradient(gamma: FloatArray) -> FloatArray:
        return -(softmax(-u @ gamma) @ u)

    result = minimize_smooth(objective, gradient, np.zeros(problem.data.p), std.control)
    weights = softmax(-u @ result.argmin)
    gamma = result.argmin / std.scale
    imbalance = weights @ problem.data.x - problem.target.xbar0
    _check_divergence("entropy", gamma, imbalance, result.converged, problem.control)
    if not result.converged:
        logger.warning(f"[EntropySolver] stopped unconverged after {result.iterations} iterations, "
                       f"max |D|={np.max(np.abs(imbalance)):.3g}")
    logger.debug(f"[EntropySolver] {result.iterations} iterations, |grad|={result.gradient_norm:.3e}")
    return _finish(problem, weights, gamma, result.converged, result.iterations)


def solve_stable(problem: CalibrationProblem) -> WeightSolution:
    """Stable balancing weights: minimize sum (w_i - 1/n)^2 subject to w >= 0, sum w = 1, |D| <= d

    With d = 0 these are the nonnegative quadratic-distance calibration weights.
    """
    std = _Standardized(problem)
    n, p = problem.data.n, problem.data.p
    half_width = problem.tolerance_d / std.scale
    try:
        qp = solve_qp(2.0 * np.eye(n), np.full(n, -2.0 / n),
                      equality=(np.ones((1, n)), np.ones(1)),
                      inequality_ge0=np.arange(n),
                      box_residuals=(std.u.T, np.zeros(p), half_width),
                      control=problem.control)
    except QPInfeasibleError as e:
        uniform = problem.data.x.mean(axis=0) - problem.target.xbar0
        raise CalibrationInfeasibleError(f"stable: constraints infeasible ({e.family})", uniform) from e

    weights = np.maximum(qp.x, 0.0)
    weights = weights / weights.sum()
    dual = _stable_balance_multipliers(qp.equality_multipliers, qp.inequality_multipliers,
                                       half_width, n) / std.scale
    solution = _finish(problem, weights, dual, qp.converged, qp.iterations)
    excess = np.abs(solution.imbalance) - problem.tolerance_d
    if not qp.converged and np.max(excess) > BALANCE_FAILURE:
        raise CalibrationInfeasibleError("stable: active-set iteration did not converge", solution.imbalance)
    logger.debug(f"[StableSolver] {qp.iterations} iterations, {int(np.sum(weights == 0))} zero weights")
    return solution


def _stable_balance_multipliers(eq_mult: FloatArray, ineq_mult: FloatArray,
                                half_width: FloatArray, n: int) -> FloatArray:
    """Per-covariate balance multiplier from the stacked QP multipliers"""
    exact = half_width == 0
    slack_count = int((~exact).sum())
    dual = np.zeros(half_width.size)
    if eq_mult.size != 1 + int(exact.sum()) or ineq_mult.size != n + 2 * slack_count:
        logger.debug("[StableSolver] dependent constraints dropped; balance multipliers unavailable")
        return dual
    dual[exact] = eq_mult[1:]
    lower = ineq_mult[n:n + slack_count]
    upper = ineq_mult[n + slack_count:]
    dual[~exact] = lower - upper
    return dual


def solve_empirical_likelihood(problem: CalibrationProblem) -> WeightSolution:
    """Empirical-likelihood weights w_i = 1 / (n (1 + lambda' u_i)), u_i = x_i - xbar0

    lambda solves sum u_i / (1 + lambda' u_i) = 0 by damped Newton from zero,
    keeping every 1 + lambda' u_i positive.
    """
    std = _Standardized(problem)
    u = std.u
    n = problem.data.n

    def residual(lam: FloatArray) -> FloatArray:
        return (u / (1.0 + u @ lam)[:, None]).sum(axis=0) / n

    def jacobian(lam: FloatArray) -> FloatArray:
        denom = (1.0 + u @ lam) ** 2
        return -(u.T / denom) @ u / n

    def admissible(lam: FloatArray) -> bool:
        return bool(np.min(1.0 + u @ lam) > 0.0)

    result = newton_system(residual, jacobian, np.zeros(problem.data.p), std.control, admissible)
    lam = result.argmin
    weights = 1.0 / (n * (1.0 + u @ lam))
    weights = weights / weights.sum()
    lam_orig = lam / std.scale
    imbalance = weights @ problem.data.x - problem.target.xbar0
    if not result.converged:
        raise CalibrationInfeasibleError(
            f"empirical_likelihood: Newton iteration failed after {result.iterations} iterations "
            f"(residual {result.gradient_norm:.3g})", imbalance)
    _check_divergence("empirical_likelihood", lam_orig, imbalance, True, problem.control)
    logger.debug(f"[ELSolver] {result.iterations} Newton iterations")
    return _finish(problem, weights, lam_orig, True, result.iterations)


_SOLVERS = {
    Method.entropy: solve_entropy,
    Method.stable: solve_stable,
    Method.empirical_likelihood: solve_empirical_likelihood,
}


def calibrate(problem: CalibrationProblem) -> WeightSolution:
    """Solve a calibration problem with the solver of its method"""
    return _SOLVERS[problem.method](problem)
