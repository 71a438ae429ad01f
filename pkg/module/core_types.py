from dataclasses import dataclass
from enum import Enum


class TaskStatus(Enum):
    """Simulation run status"""
    PENDING = 20
    RUNNING = 30
    COMPLETED = 50
    FAILED = 60


class YModel(Enum):
    """Outcome model used to generate trial outcomes"""
    LINEAR = "linear"        # y = beta'x + eps
    THRESHOLD = "threshold"  # y = 1{beta'x + eps > 0}

    @staticmethod
    def from_name(name: "str | YModel") -> "YModel":
        if isinstance(name, YModel):
            return name
        for m in YModel:
            if m.value == str(name).strip().lower():
                return m
        raise ValueError(f"Invalid outcome model: {name}")


class PModel(Enum):
    """Covariate distribution of trial and target"""
    NORMAL = "normal"        # X ~ N(m, I)
    LOGNORMAL = "lognormal"  # X = exp(0.5 Z), Z ~ N(m, I)

    @staticmethod
    def from_name(name: "str | PModel") -> "PModel":
        if isinstance(name, PModel):
            return name
        for m in PModel:
            if m.value == str(name).strip().lower():
                return m
        raise ValueError(f"Invalid covariate model: {name}")


class ModelBlock(Enum):
    """Which of the working models is correctly specified"""
    BOTH_CORRECT = "both_correct"
    Y_INCORRECT = "y_incorrect"
    P_INCORRECT = "p_incorrect"

    @property
    def y_model(self) -> YModel:
        return YModel.THRESHOLD if self is ModelBlock.Y_INCORRECT else YModel.LINEAR

    @property
    def p_model(self) -> PModel:
        return PModel.LOGNORMAL if self is ModelBlock.P_INCORRECT else PModel.NORMAL


@dataclass
class OptimSettings:
    """Solver iteration controls"""
    max_iterations: int = 300
    relative_tolerance: float = 1e-8
    gradient_tolerance: float = 1e-8


@dataclass
class SimulationDefaults:
    """Defaults of the Monte Carlo study"""
    n0: int = 2000
    sigma_eps: float = 0.5
    threshold_noise: float = 0.0
    n_runs: int = 2000
    comparison_runs: int = 1000
    bootstrap_replicates: int = 50
    tolerance_d: float = 0.005
    degenerate_failure_rate: float = 0.10
    beta: float = 0.3
