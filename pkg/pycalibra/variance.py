"""Variance estimators for calibration-weighted means

v0 is the plain weighted-residual sandwich, v_ss the survey-sampling form
with a fitted outcome model, v_2s the two-step sandwich that accounts for
the weights being estimated. The bootstrap re-solves the weights on every
resample while the target summary is held fixed.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple

import numpy as np
import numpy.typing as npt

from .calibration import (CalibrationProblem, CovariateMatrix, Method, TargetSummary,
                          WeightSolution, calibrate)
from .estimators import EstimandSpec, as_weights, evaluate
from .exceptions import (BootstrapFailedError, CalibraError, DomainError, EstimatingEquationError,
                         SingularSandwichError)
from .numkit import FloatArray, OptimControl, RngStream

logger = logging.getLogger(__name__)

EQUATION_TOLERANCE = 1e-8
"""Max-norm bound on the summed estimating functions at a converged solution"""
SINGULAR_CONDITION = 1e12

BOOTSTRAP_CONTROL = OptimControl(max_iterations=300, relative_tolerance=1e-5, gradient_tolerance=1e-5)


class VarianceMethod(Enum):
    v0 = "v0"
    vss = "vss"
    v2s = "v2s"
    bootstrap = "boot"

    @staticmethod
    def from_name(name: "str | VarianceMethod") -> "VarianceMethod":
        if isinstance(name, VarianceMethod):
            return name
        key = str(name).strip().lower()
        if key == "bootstrap":
            return VarianceMethod.bootstrap
        for m in VarianceMethod:
            if m.value == key:
                return m
        raise DomainError(f"Invalid variance method: {name}")


@dataclass(frozen=True)
class SandwichWork:
    """Pieces of the two-step sandwich"""

    a: FloatArray
    """sum_i w_i x_i (x_i - xbar0)', p x p"""
    b: FloatArray
    """sum_i w_i x_i (y_i - mu1), length p"""
    s1: FloatArray
    """rows w_i (x_i - xbar0)"""
    s2: FloatArray
    """w_i (y_i - mu1)"""
    corrected: FloatArray
    """S_i = s2_i - b' A^-1 s1_i"""


@dataclass(frozen=True)
class BootstrapSpec:
    replicates: int = 50
    rng: RngStream = field(default_factory=lambda: RngStream(134))
    reestimate_weights: bool = True
    control: OptimControl = BOOTSTRAP_CONTROL
    """solver control for the replicate fits, looser than the main fit"""
    max_workers: int = 1

    def __post_init__(self):
        if int(self.replicates) < 2:
            raise DomainError(f"bootstrap needs at least 2 replicates, got {self.replicates}")
        if not self.reestimate_weights:
            raise DomainError("bootstrap replicates always re-estimate the weights")
        if int(self.max_workers) < 1:
            raise DomainError(f"max_workers must be positive, got {self.max_workers}")


def v0(data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike", mu1_hat: float) -> float:
    """sum w_i^2 (y_i - mu1)^2"""
    weights = as_weights(w, data.n)
    return float(np.sum(weights ** 2 * (data.y - mu1_hat) ** 2))


def v_ss(data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike", fitted: npt.ArrayLike) -> float:
    """sum w_i^2 (y_i - m(x_i))^2 with m a fitted outcome model"""
    weights = as_weights(w, data.n)
    fitted = np.asarray(fitted, dtype=float)
    if fitted.shape != data.y.shape:
        raise DomainError(f"{fitted.size} fitted values for {data.n} rows")
    return float(np.sum(weights ** 2 * (data.y - fitted) ** 2))


def sandwich_work(data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike", target: TargetSummary,
                  mu1_hat: float, equation_tolerance: float = EQUATION_TOLERANCE) -> SandwichWork:
    """Estimating functions and their Jacobian sums at the supplied weights

    Raises:
        EstimatingEquationError: the summed estimating functions are not ~0
        SingularSandwichError: A is singular
    """
    weights = as_weights(w, data.n)
    centred = data.x - target.xbar0
    resid = data.y - mu1_hat
    s1 = weights[:, None] * centred
    s2 = weights * resid

    x_scale = max(1.0, float(np.max(np.abs(data.x))))
    y_scale = max(1.0, float(np.max(np.abs(data.y))))
    eq1 = float(np.max(np.abs(s1.sum(axis=0))))
    eq2 = abs(float(s2.sum()))
    if eq1 > equation_tolerance * x_scale or eq2 > equation_tolerance * y_scale:
        raise EstimatingEquationError(
            f"estimating equations do not hold (|sum S1|={eq1:.3g}, |sum S2|={eq2:.3g}); "
            f"weights must be a converged entropy solution")

    a = (weights[:, None] * data.x).T @ centred
    b = (weights * resid) @ data.x
    if not np.all(np.isfinite(a)) or np.linalg.cond(a) > SINGULAR_CONDITION:
        raise SingularSandwichError("sandwich matrix A is singular; balanced covariates are collinear")
    corrected = s2 - s1 @ np.linalg.solve(a.T, b)
    return SandwichWork(a=a, b=b, s1=s1, s2=s2, corrected=corrected)


def v_2s(data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike", target: TargetSummary, mu1_hat: float) -> float:
    """Two-step sandwich variance of the entropy-weighted mean

    Raises:
        DomainError: the weights come from a method other than entropy
    """
    if isinstance(w, WeightSolution) and w.method is not Method.entropy:
        raise DomainError(f"the two-step sandwich needs entropy weights, got {w.method.value}")
    work = sandwich_work(data, w, target, mu1_hat)
    return float(work.corrected @ work.corrected)


def augment_target_variance(v_mu1: float, target: TargetSummary) -> float:
    """v_mu1 + sigma0^2 / n0"""
    sigma0_sq, n0 = target.require("sigma0_sq", "n0")
    return float(v_mu1) + float(sigma0_sq) / int(n0)


def _replicate(problem: CalibrationProblem, data: CovariateMatrix, estimand: EstimandSpec,
               spec: BootstrapSpec, r: int) -> float | None:
    rows = spec.rng.child(r).generator().integers(0, data.n, size=data.n)
    try:
        resampled = data.take(rows)
        solution = calibrate(problem.with_data(resampled, spec.control))
        return evaluate(estimand, resampled, solution, problem.target)
    except (CalibraError, np.linalg.LinAlgError) as e:
        logger.debug(f"[Bootstrap] replicate {r} failed: {e}")
        return None


def bootstrap_variance(data: CovariateMatrix, problem: CalibrationProblem, estimand: EstimandSpec,
                       spec: BootstrapSpec) -> Tuple[float, int]:
    """Sample variance of the estimate over row resamples, and the number of failed replicates

    Replicate r draws from `spec.rng.child(r)`, so the result does not depend
    on `max_workers`.

    Raises:
        BootstrapFailedError: fewer than two replicates succeeded
    """
    indices = range(int(spec.replicates))
    if spec.max_workers > 1:
        with ThreadPoolExecutor(max_workers=spec.max_workers) as executor:
            results: List[float | None] = list(executor.map(
                lambda r: _replicate(problem, data, estimand, spec, r), indices))
    else:
        results = [_replicate(problem, data, estimand, spec, r) for r in indices]

    estimates = np.array([e for e in results if e is not None], dtype=float)
    failures = len(results) - estimates.size
    if estimates.size < 2:
        raise BootstrapFailedError(f"{failures} of {spec.replicates} bootstrap replicates failed")
    if failures:
        logger.warning(f"[Bootstrap] dropped {failures} of {spec.replicates} replicates that failed to calibrate")
    return float(np.var(estimates, ddof=1)), failures
