import os
import json
import logging
from typing import Dict, Any

from pycalibra.numkit import OptimControl
from .core_types import OptimSettings, SimulationDefaults

logger = logging.getLogger(__name__)

DEFAULT_SEED = 134
THREADS_ENV = "CALIBRA_THREADS"


class ConfigManager:
    """Configuration manager backed by a JSON file"""

    def __init__(self, config_path: str | None = None):
        if config_path is None:
            config_path = os.path.join(os.path.dirname(__file__), "../config.json")

        self.config_path = config_path
        self.config = self._load_config()
        self._validate_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load the config file; a missing or malformed file yields the defaults"""
        try:
            with open(self.config_path, "r", encoding='utf-8') as f:
                config = json.load(f)
                logger.info(f"[ConfigManager] loaded config: {self.config_path}")
                return config if isinstance(config, dict) else {}
        except FileNotFoundError:
            logger.warning(f"[ConfigManager] config file not found, using defaults: {self.config_path}")
            return {}
        except json.JSONDecodeError as e:
            logger.error(f"[ConfigManager] malformed config file: {e}")
            return {}
        except Exception as e:
            logger.error(f"[ConfigManager] failed to load config: {e}")
            return {}

    def _validate_config(self) -> None:
        numeric_fields = ["optim.max_iterations", "optim.relative_tolerance", "optim.gradient_tolerance",
                          "bootstrap.max_iterations", "bootstrap.relative_tolerance",
                          "bootstrap.gradient_tolerance", "simulation.n0", "simulation.n_runs",
                          "simulation.sigma_eps"]
        nonnegative_fields = ["simulation.threshold_noise"]
        invalid = []
        for key in numeric_fields + nonnegative_fields:
            value = self.get(key)
            if value is None:
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                invalid.append(key)
            elif value < 0 or (value == 0 and key not in nonnegative_fields):
                invalid.append(key)
        if invalid:
            logger.warning(f"[ConfigManager] ignoring invalid config values: {invalid}")
            for key in invalid:
                self._drop(key)

    def _drop(self, key: str) -> None:
        *parents, leaf = key.split(".")
        node = self.config
        for k in parents:
            node = node[k]
        node.pop(leaf, None)

    def get(self, key: str, default: Any = None) -> Any:
        """Dotted-key lookup"""
        keys = key.split(".")
        value = self.config
        try:
            for k in keys:
                value = value[k]
            return value
        except (KeyError, TypeError):
            return default

    def _control(self, section: str, defaults: OptimSettings) -> OptimControl:
        return OptimControl(
            max_iterations=int(self.get(f"{section}.max_iterations", defaults.max_iterations)),
            relative_tolerance=float(self.get(f"{section}.relative_tolerance", defaults.relative_tolerance)),
            gradient_tolerance=float(self.get(f"{section}.gradient_tolerance", defaults.gradient_tolerance)),
        )

    def get_optim_control(self) -> OptimControl:
        """Solver control of the main fit"""
        return self._control("optim", OptimSettings())

    def get_bootstrap_control(self) -> OptimControl:
        """Looser solver control of bootstrap replicate fits"""
        return self._control("bootstrap", OptimSettings(300, 1e-5, 1e-5))

    def get_bootstrap_replicates(self) -> int:
        return int(self.get("bootstrap.replicates", SimulationDefaults.bootstrap_replicates))

    def get_simulation_defaults(self) -> SimulationDefaults:
        d = SimulationDefaults()
        return SimulationDefaults(
            n0=int(self.get("simulation.n0", d.n0)),
            sigma_eps=float(self.get("simulation.sigma_eps", d.sigma_eps)),
            threshold_noise=float(self.get("simulation.threshold_noise", d.threshold_noise)),
            n_runs=int(self.get("simulation.n_runs", d.n_runs)),
            comparison_runs=int(self.get("simulation.comparison_runs", d.comparison_runs)),
            bootstrap_replicates=self.get_bootstrap_replicates(),
            tolerance_d=float(self.get("simulation.tolerance_d", d.tolerance_d)),
            degenerate_failure_rate=float(self.get("simulation.degenerate_failure_rate", d.degenerate_failure_rate)),
            beta=float(self.get("simulation.beta", d.beta)),
        )

    def get_seed(self) -> int:
        return int(self.get("runtime.seed", DEFAULT_SEED))

    def get_threads(self) -> int:
        """Worker threads; the CALIBRA_THREADS environment variable wins over the file"""
        raw = os.getenv(THREADS_ENV) or self.get("runtime.threads", 1)
        try:
            threads = int(raw)
        except (TypeError, ValueError):
            logger.warning(f"[ConfigManager] invalid thread count {raw!r}, using 1")
            return 1
        return max(1, threads)
