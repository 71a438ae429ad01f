from .core_types import TaskStatus, YModel, PModel, ModelBlock, OptimSettings, SimulationDefaults
from .core_config import ConfigManager
from .core_task import SimulationTask, BatchProcessor
from .simulation import ScenarioConfig, ScenarioTruth, SimRow, SimulationSettings
from .simulation import generate_target, generate_trial, run_scenario, run_grid, run_method_comparison, builtin_grid
from .file_io import TargetSummaryFile, ScenarioFile, read_ipd_csv, read_target_summary, load_scenarios
from .reporting import format_report, format_sim_rows, format_comparison, format_weights
