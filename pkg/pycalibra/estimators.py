"""Weighted point estimators for indirect comparison and the regression (STC) comparator

The module does not care which party owns the individual data: `data` is
whatever sample is being reweighted and `target` the population it is
reweighted to.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Any, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from .calibration import CalibrationProblem, CovariateMatrix, Method, TargetSummary, WeightSolution, calibrate
from .exceptions import (BootstrapFailedError, DimensionError, DomainError, EstimatingEquationError,
                         MissingArmError, SingularFitError, SingularSandwichError)
from .numkit import FloatArray, least_squares_qr
from .util import export_attr_to_json, to_jsonable

logger = logging.getLogger(__name__)


class EstimandKind(Enum):
    """What the weighted sample is used to estimate"""

    mu1_weighted = "mu1"
    """mean outcome of the trial treatment in the target population"""
    unanchored_delta = "unanchored"
    generalization_delta = "generalize"
    anchored_delta = "anchored"
    regression_mu1 = "regression"
    """OLS outcome model evaluated at the target means (STC / generalized regression)"""

    @staticmethod
    def from_name(name: "str | EstimandKind") -> "EstimandKind":
        if isinstance(name, EstimandKind):
            return name
        key = str(name).strip().lower()
        for kind in EstimandKind:
            if key in (kind.value, kind.name):
                return kind
        raise DomainError(f"Invalid estimand: {name}")


@dataclass(frozen=True)
class EstimandSpec:
    kind: EstimandKind = EstimandKind.mu1_weighted
    anchor_arm_label: int | None = None
    """comparator arm label inside the trial; inferred when there is exactly one label besides 1"""

    def __post_init__(self):
        object.__setattr__(self, "kind", EstimandKind.from_name(self.kind))

    @property
    def uses_arms(self) -> bool:
        return self.kind in (EstimandKind.generalization_delta, EstimandKind.anchored_delta)

    def export_json(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "anchor_arm_label": self.anchor_arm_label}


@dataclass
class EstimateReport:
    """Point estimate with standard errors and 95% confidence intervals per variance method"""

    estimate: float
    estimand: EstimandSpec
    weights_used: WeightSolution
    unadjusted_estimate: float
    se_by_method: Dict[str, float] = field(default_factory=dict)
    ci95_by_method: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    se_augmented_by_method: Dict[str, float] = field(default_factory=dict)
    """SEs including the sigma0^2/n0 target-variance term"""
    bootstrap_failures: int | None = None
    caveats: List[str] = field(default_factory=list)

    def add_se(self, method: str, se: float) -> None:
        self.se_by_method[method] = float(se)
        self.ci95_by_method[method] = (self.estimate - 1.96 * se, self.estimate + 1.96 * se)

    def export_json(self) -> Dict[str, Any]:
        data = export_attr_to_json(self, ["estimate", "unadjusted_estimate", "se_by_method",
                                          "ci95_by_method", "se_augmented_by_method",
                                          "bootstrap_failures", "caveats"])
        data["estimand"] = self.estimand.export_json()
        data["weights"] = to_jsonable(self.weights_used)
        data["ess"] = to_jsonable(self.weights_used.ess)
        return data


def uniform_weights(n: int) -> FloatArray:
    return np.full(n, 1.0 / n)


def as_weights(w: "WeightSolution | npt.ArrayLike", n: int) -> FloatArray:
    weights = np.asarray(w.weights if isinstance(w, WeightSolution) else w, dtype=float)
    if weights.shape != (n,):
        raise DimensionError(f"{weights.size} weights for {n} rows")
    return weights


def weighted_mu1(data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike") -> float:
    """sum w_i y_i"""
    return float(as_weights(w, data.n) @ data.y)


def unanchored_delta(data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike", target: TargetSummary) -> float:
    """sum w_i y_i - ybar0"""
    (ybar0,) = target.require("ybar0")
    return weighted_mu1(data, w) - float(ybar0)


def arm_masks(data: CovariateMatrix, anchor_arm_label: int | None = None) -> Tuple[npt.NDArray[np.bool_], npt.NDArray[np.bool_]]:
    """Boolean masks of the treated (label 1) and comparator rows"""
    if data.arm is None:
        raise MissingArmError("arm labels are required for this estimand")
    labels = set(np.unique(data.arm).tolist())
    if anchor_arm_label is None:
        others = sorted(labels - {1})
        if len(others) != 1:
            raise MissingArmError(f"cannot infer the comparator arm from labels {sorted(labels)}")
        anchor_arm_label = others[0]
    unexpected = labels - {1, anchor_arm_label}
    if unexpected:
        raise MissingArmError(f"unexpected arm labels {sorted(unexpected)}")
    treated = data.arm == 1
    comparator = data.arm == anchor_arm_label
    if not treated.any() or not comparator.any():
        raise MissingArmError("both the treated and the comparator arm must be nonempty")
    return treated, comparator


def _weighted_arm_contrast(data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike",
                           anchor_arm_label: int | None) -> float:
    """Arm contrast on the n*w scale (mean-one weights), each arm averaged over its own size"""
    weights = as_weights(w, data.n) * data.n
    treated, comparator = arm_masks(data, anchor_arm_label)
    contrast = treated / treated.sum() - comparator / comparator.sum()
    return float(np.sum(weights * data.y * contrast))


def generalization_delta(data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike",
                         anchor_arm_label: int | None = None) -> float:
    """Treatment effect of a randomized trial transported to the target population

    sum (n w_i) y_i (T_i/n_treated - (1-T_i)/n_control). Weights are rescaled to
    mean one, so uniform weights give the plain difference of arm means.
    """
    return _weighted_arm_contrast(data, w, anchor_arm_label)


def anchored_delta(data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike", target: TargetSummary,
                   anchor_arm_label: int | None = None) -> float:
    """Weighted within-trial contrast minus the target's (mu_00 - mu_02) contrast"""
    ybar0, mu02 = target.require("ybar0", "mu02")
    return _weighted_arm_contrast(data, w, anchor_arm_label) - (float(ybar0) - float(mu02))


def _design(x: FloatArray) -> FloatArray:
    return np.hstack([np.ones((x.shape[0], 1)), x])


def ols_fitted(data: CovariateMatrix) -> FloatArray:
    """Fitted values of the within-trial OLS of y on [1, x]"""
    _, fitted = least_squares_qr(_design(data.x), data.y)
    return fitted


def regression_mu1(data: CovariateMatrix, target: TargetSummary) -> float:
    """[1, xbar0]' beta_hat from OLS within the trial

    Raises:
        SingularFitError: [1, x] is rank deficient
    """
    coef, _ = least_squares_qr(_design(data.x), data.y)
    return float(coef[0] + target.xbar0 @ coef[1:])


def imbalance_vector(data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike", target: TargetSummary) -> FloatArray:
    """D = sum w_i x_i - xbar0"""
    return as_weights(w, data.n) @ data.x - target.xbar0


def evaluate(estimand: EstimandSpec, data: CovariateMatrix, w: "WeightSolution | npt.ArrayLike",
             target: TargetSummary) -> float:
    """Point estimate of any estimand for the given weights"""
    kind = estimand.kind
    if kind is EstimandKind.mu1_weighted:
        return weighted_mu1(data, w)
    if kind is EstimandKind.unanchored_delta:
        return unanchored_delta(data, w, target)
    if kind is EstimandKind.generalization_delta:
        return generalization_delta(data, w, estimand.anchor_arm_label)
    if kind is EstimandKind.anchored_delta:
        return anchored_delta(data, w, target, estimand.anchor_arm_label)
    return regression_mu1(data, target)


def unadjusted(estimand: EstimandSpec, data: CovariateMatrix, target: TargetSummary) -> float:
    """The estimand evaluated with uniform weights (the plain trial mean for the regression comparator)"""
    if estimand.kind is EstimandKind.regression_mu1:
        return float(data.y.mean())
    return evaluate(estimand, data, uniform_weights(data.n), target)


_MU1_KINDS = (EstimandKind.mu1_weighted, EstimandKind.unanchored_delta)


def estimate(problem: CalibrationProblem, estimand: EstimandSpec,
             variance_methods: Sequence[Any] = ("v2s",), bootstrap: Any = None,
             solution: WeightSolution | None = None) -> EstimateReport:
    """Solve the weights, evaluate the estimand and attach an SE per applicable variance method

    Sandwich-type variances (v0, vss, v2s) exist only for the weighted-mean
    estimands; v2s additionally needs entropy weights. Inapplicable requests
    are skipped with a caveat. `bootstrap` is a `variance.BootstrapSpec`.
    """
    from . import variance

    data, target = problem.data, problem.target
    if solution is None:
        solution = calibrate(problem)
    est = evaluate(estimand, data, solution, target)
    report = EstimateReport(estimate=est, estimand=estimand, weights_used=solution,
                            unadjusted_estimate=unadjusted(estimand, data, target))
    if not solution.converged:
        report.caveats.append("weights did not meet the gradient tolerance; balance is approximate")

    mu1 = weighted_mu1(data, solution)
    variances: Dict[str, float] = {}
    for requested in variance_methods:
        method = variance.VarianceMethod.from_name(requested)
        name = method.value
        if method is variance.VarianceMethod.bootstrap:
            spec = bootstrap if bootstrap is not None else variance.BootstrapSpec()
            try:
                variances[name], report.bootstrap_failures = variance.bootstrap_variance(
                    data, problem, estimand, spec)
            except BootstrapFailedError as e:
                report.caveats.append(f"boot: {e}")
            continue
        if estimand.kind not in _MU1_KINDS:
            report.caveats.append(f"{name}: only defined for weighted-mean estimands; use the bootstrap")
            continue
        if method is variance.VarianceMethod.v0:
            variances[name] = variance.v0(data, solution, mu1)
        elif method is variance.VarianceMethod.vss:
            try:
                variances[name] = variance.v_ss(data, solution, ols_fitted(data))
            except SingularFitError as e:
                report.caveats.append(f"vss: {e}")
        elif solution.method is not Method.entropy:
            report.caveats.append(f"v2s: defined for entropy weights only, not {solution.method.value}")
        else:
            try:
                variances[name] = variance.v_2s(data, solution, target, mu1)
            except (EstimatingEquationError, SingularSandwichError) as e:
                report.caveats.append(f"v2s: {e}")

    augment = target.sigma0_sq is not None and target.n0 is not None and estimand.kind in _MU1_KINDS
    for name, v in variances.items():
        report.add_se(name, float(np.sqrt(v)))
        if augment:
            report.se_augmented_by_method[name] = float(np.sqrt(variance.augment_target_variance(v, target)))
    logger.info(f"[Estimator] {estimand.kind.value} = {est:.6g} (unadjusted {report.unadjusted_estimate:.6g}), "
                f"SEs {report.se_by_method}")
    return report
