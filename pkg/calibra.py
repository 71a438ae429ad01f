import os
import sys
import argparse
import logging
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from module import (
    ConfigManager,
    SimulationSettings,
    builtin_grid,
    run_grid,
    run_method_comparison,
    read_ipd_csv,
    read_target_summary,
    load_scenarios,
    format_report,
    format_sim_rows,
    format_comparison,
    format_weights,
)
from module.file_io import ScenarioPlan, write_json, write_table_csv, write_weights_csv
from module.simulation import GRIDS, rows_to_frame
from pycalibra import (
    BootstrapSpec,
    CalibrationProblem,
    EstimandSpec,
    Method,
    RngStream,
    WeightSolution,
    calibrate,
    estimate,
)
from pycalibra.exceptions import (BootstrapFailedError, CalibrationInfeasibleError, DomainError, InputParseError,
                                  MissingArmError, MissingSummaryError, QPInfeasibleError)
from dotenv import load_dotenv
load_dotenv()

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
os.makedirs(os.path.join(BASE_DIR, "logs"), exist_ok=True)

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(),
        logging.FileHandler(os.path.join(BASE_DIR, 'logs', 'calibra.log'), encoding='utf-8')
    ]
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_PARSE = 3
EXIT_MISSING = 4


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented exit code"""
    if isinstance(error, (CalibrationInfeasibleError, QPInfeasibleError)):
        return EXIT_INFEASIBLE
    if isinstance(error, (MissingSummaryError, MissingArmError)):
        return EXIT_MISSING
    if isinstance(error, (InputParseError, ValidationError, DomainError)):
        return EXIT_PARSE
    return EXIT_ERROR


def parse_tolerance(text: str | None) -> List[float] | None:
    """'0.005' or '0.01,0.02,0.005' -> list of floats"""
    if text is None or not text.strip():
        return None
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as e:
        raise InputParseError(f"--d expects a number or a comma-separated vector, got {text!r}") from e
    return values


class CalibraApp:
    """Command facade binding files, configuration and the library"""

    def __init__(self, config_path: str | None = None, seed: int | None = None):
        self.config_manager = ConfigManager(config_path)
        self.seed = self.config_manager.get_seed() if seed is None else int(seed)
        self.threads = self.config_manager.get_threads()
        self.control = self.config_manager.get_optim_control()
        self.bootstrap_control = self.config_manager.get_bootstrap_control()
        self.defaults = self.config_manager.get_simulation_defaults()
        logger.info(f"[CalibraApp] seed {self.seed}, {self.threads} thread(s)")

    def _problem(self, ipd: str, target_path: str, method: str, d: str | None,
                 outcome: str, arm: str | None, covariates: Sequence[str] | None) -> CalibrationProblem:
        target = read_target_summary(target_path)
        data = read_ipd_csv(ipd, target, outcome=outcome, arm=arm, covariates=covariates)
        return CalibrationProblem(data, target, Method.from_name(method), parse_tolerance(d), self.control)

    def compute_weights(self, ipd: str, target_path: str, method: str = "entropy", d: str | None = None,
                        out: str = "weights.csv", outcome: str = "y", arm: str | None = None,
                        covariates: Sequence[str] | None = None) -> WeightSolution:
        """Solve balancing weights, write row_id/weight CSV plus a JSON diagnostics file"""
        problem = self._problem(ipd, target_path, method, d, outcome, arm, covariates)
        solution = calibrate(problem)
        write_weights_csv(out, solution.weights)
        write_json(os.path.splitext(out)[0] + ".json", solution)
        print(format_weights(solution, problem.data, problem.target))
        return solution

    def run_estimate(self, ipd: str, target_path: str, method: str = "entropy", d: str | None = None,
                     estimand: str = "mu1", variance_methods: Sequence[str] = ("v2s",), boot_reps: int | None = None,
                     anchor_arm: int | None = None, out: str = "report.json", outcome: str = "y",
                     arm: str | None = None, covariates: Sequence[str] | None = None):
        spec = EstimandSpec(estimand, anchor_arm)
        if spec.uses_arms and arm is None:
            raise MissingArmError(f"estimand '{spec.kind.value}' needs --arm")
        problem = self._problem(ipd, target_path, method, d, outcome, arm, covariates)
        bootstrap = BootstrapSpec(replicates=boot_reps or self.config_manager.get_bootstrap_replicates(),
                                  rng=RngStream(self.seed), control=self.bootstrap_control,
                                  max_workers=self.threads)
        report = estimate(problem, spec, variance_methods, bootstrap)
        write_json(out, report)
        print(format_report(report))
        return report

    def _settings(self) -> SimulationSettings:
        return SimulationSettings(control=self.control, bootstrap_control=self.bootstrap_control,
                                  threads=self.threads, degenerate_failure_rate=self.defaults.degenerate_failure_rate)

    def _plan(self, scenarios: str | None, grids: Sequence[str], n_runs: int | None) -> ScenarioPlan:
        if n_runs is not None and n_runs < 1:
            raise InputParseError(f"--n-runs must be >= 1, got {n_runs}")
        if scenarios:
            return load_scenarios(scenarios, self.defaults, self.seed, n_runs)
        plan = ScenarioPlan(methods=[m.value for m in Method], tolerance_d=self.defaults.tolerance_d)
        for grid in grids:
            configs = builtin_grid(grid, self.defaults, seed=self.seed, n_runs=n_runs)
            (plan.comparisons if grid == "methods" else plan.tables)[grid] = configs
        return plan

    def _run_comparisons(self, plan: ScenarioPlan, out_dir: str, methods: Sequence[str] | None,
                         d: str | None) -> Dict[str, str]:
        written = {}
        tolerance = parse_tolerance(d) or plan.tolerance_d
        for name, configs in plan.comparisons.items():
            frames = [run_method_comparison(c, methods or plan.methods, tolerance, self._settings()) for c in configs]
            frame = pd.concat(frames, ignore_index=True)
            path = os.path.join(out_dir, f"{name}.csv")
            write_table_csv(path, frame)
            print(format_comparison(frame))
            written[name] = path
        return written

    def run_simulate(self, out_dir: str, scenarios: str | None = None, grids: Sequence[str] = ("shift",),
                     n_runs: int | None = None) -> Dict[str, str]:
        """Run table grids (and any comparison scenarios), one CSV per table"""
        plan = self._plan(scenarios, grids, n_runs)
        written = {}
        for name, configs in plan.tables.items():
            rows = run_grid(configs, self._settings())
            path = os.path.join(out_dir, f"{name}.csv")
            write_table_csv(path, rows_to_frame(rows))
            print(format_sim_rows(rows))
            written[name] = path
        written.update(self._run_comparisons(plan, out_dir, None, None))
        return written

    def run_compare(self, out_dir: str, scenarios: str | None = None, methods: Sequence[str] | None = None,
                    d: str | None = None, n_runs: int | None = None) -> Dict[str, str]:
        """Per-run errors of the weighting methods (box-plot ready long table)"""
        plan = self._plan(scenarios, ["methods"], n_runs)
        if methods:
            methods = [Method.from_name(m).value for m in methods]
        return self._run_comparisons(plan, out_dir, methods, d)


class CalibraArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the parse-error code"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def parse_arguments(argv: Sequence[str] | None = None):
    """Parse command-line arguments"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='config file path (default: config.json next to this script)')
    common.add_argument('--seed', type=int, help='random seed (default: runtime.seed in config, 134)')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    data_args = argparse.ArgumentParser(add_help=False)
    data_args.add_argument('ipd', type=str, help='individual data CSV (header row required)')
    data_args.add_argument('target', type=str, help='target summary JSON')
    data_args.add_argument('--method', type=str, default='entropy', help='maic|entropy|sbw|el (default: entropy)')
    data_args.add_argument('--d', type=str, help='balance tolerance for sbw: a number or comma-separated vector')
    data_args.add_argument('--outcome', type=str, default='y', help='outcome column (default: y)')
    data_args.add_argument('--arm', type=str, help='arm label column (1 = treatment of interest)')
    data_args.add_argument('--covariates', type=str, help='comma-separated covariate columns')

    parser = CalibraArgumentParser(
        description="calibra - calibration weighting for indirect comparison (MAIC, stable balancing, empirical likelihood)",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python calibra.py weights ipd.csv target.json --method maic --out weights.csv
  python calibra.py weights ipd.csv target.json --method sbw --d 0.005
  python calibra.py estimate ipd.csv target.json --estimand unanchored --variance v0,v2s,boot
  python calibra.py estimate ipd.csv target.json --estimand anchored --arm trt --variance boot --boot-reps 200
  python calibra.py simulate --grid shift --n-runs 200 --out results/
  python calibra.py simulate --scenarios scenarios.toml --out results/
  python calibra.py compare --n-runs 1000 --out results/

Exit codes:
  0 success, 2 infeasible calibration, 3 parse error, 4 missing summary or arm, 1 other
        """,
    )
    sub = parser.add_subparsers(dest='command', required=True, parser_class=CalibraArgumentParser)

    p_weights = sub.add_parser('weights', parents=[common, data_args], help='solve balancing weights')
    p_weights.add_argument('--out', type=str, default='weights.csv', help='weights CSV (diagnostics go to .json)')

    p_est = sub.add_parser('estimate', parents=[common, data_args], help='point estimate with SEs')
    p_est.add_argument('--estimand', type=str, default='mu1', help='mu1|unanchored|generalize|anchored|regression')
    p_est.add_argument('--variance', type=str, default='v2s', help='comma-separated subset of v0,vss,v2s,boot')
    p_est.add_argument('--boot-reps', type=int, help='bootstrap replicates (default: bootstrap.replicates, 50)')
    p_est.add_argument('--anchor-arm', type=int, help='comparator arm label (default: the only label besides 1)')
    p_est.add_argument('--out', type=str, default='report.json', help='report JSON path')

    p_sim = sub.add_parser('simulate', parents=[common], help='Monte Carlo tables')
    p_sim.add_argument('--scenarios', type=str, help='scenario file (JSON or TOML)')
    p_sim.add_argument('--grid', type=str, action='append', help=f'built-in grid: {", ".join(GRIDS)} (repeatable)')
    p_sim.add_argument('--n-runs', type=int, help='override runs per scenario')
    p_sim.add_argument('--out', type=str, default='results', help='output directory')

    p_cmp = sub.add_parser('compare', parents=[common], help='per-run errors of the weighting methods')
    p_cmp.add_argument('--scenarios', type=str, help='scenario file (JSON or TOML)')
    p_cmp.add_argument('--methods', type=str, help='comma-separated methods (default: all three)')
    p_cmp.add_argument('--d', type=str, help='balance tolerance for sbw (default: simulation.tolerance_d)')
    p_cmp.add_argument('--n-runs', type=int, help='override runs per scenario')
    p_cmp.add_argument('--out', type=str, default='results', help='output directory')

    return parser.parse_args(argv)


def _split(text: str | None) -> List[str] | None:
    return [s.strip() for s in text.split(",") if s.strip()] if text else None


def _log_infeasible(error: BaseException) -> None:
    imbalance = getattr(error, "imbalance", None)
    if imbalance:
        logger.error(f"[Main] imbalance at the last iterate: {np.array2string(np.asarray(imbalance), precision=6)}")


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point; returns the exit code"""
    args = parse_arguments(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        app = CalibraApp(args.config, args.seed)
        if args.command == 'weights':
            app.compute_weights(args.ipd, args.target, args.method, args.d, args.out,
                                args.outcome, args.arm, _split(args.covariates))
        elif args.command == 'estimate':
            app.run_estimate(args.ipd, args.target, args.method, args.d, args.estimand,
                             _split(args.variance) or [], args.boot_reps, args.anchor_arm, args.out,
                             args.outcome, args.arm, _split(args.covariates))
        elif args.command == 'simulate':
            written = app.run_simulate(args.out, args.scenarios, args.grid or ["shift"], args.n_runs)
            logger.info(f"[Main] wrote {', '.join(written.values())}")
        elif args.command == 'compare':
            written = app.run_compare(args.out, args.scenarios, _split(args.methods), args.d, args.n_runs)
            logger.info(f"[Main] wrote {', '.join(written.values())}")
        return EXIT_OK
    except KeyboardInterrupt:
        logger.info("[Main] interrupted")
        return EXIT_ERROR
    except BootstrapFailedError as e:
        logger.error(f"[Main] {e}")
        return EXIT_ERROR
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"[Main] {type(e).__name__}: {e}")
        if code == EXIT_INFEASIBLE:
            _log_infeasible(e)
        return code
    finally:
        logger.debug("[Main] done")


if __name__ == "__main__":
    sys.exit(main())
