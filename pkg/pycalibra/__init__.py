from .numkit import OptimControl, OptimResult, QPResult, RngStream
from .numkit import minimize_smooth, solve_qp, find_root_scalar, newton_system, least_squares_qr

from .calibration import Method, CovariateMatrix, TargetSummary, WeightSolution, CalibrationProblem
from .calibration import solve_entropy, solve_stable, solve_empirical_likelihood, calibrate, effective_sample_size

from .estimators import EstimandKind, EstimandSpec, EstimateReport
from .estimators import weighted_mu1, unanchored_delta, generalization_delta, anchored_delta
from .estimators import regression_mu1, ols_fitted, imbalance_vector, evaluate, estimate

from .variance import VarianceMethod, SandwichWork, BootstrapSpec
from .variance import v0, v_ss, v_2s, sandwich_work, bootstrap_variance, augment_target_variance

from .exceptions import (CalibraError, DomainError, DimensionError, BracketError, QPInfeasibleError,
                         CalibrationInfeasibleError, MissingSummaryError, MissingArmError, SingularFitError,
                         SingularSandwichError, EstimatingEquationError, BootstrapFailedError, InputParseError)
