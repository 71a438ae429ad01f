"""Console summaries of estimates and simulation tables"""

import logging
from typing import Sequence

import numpy as np
import pandas as pd
from tabulate import tabulate

from pycalibra.calibration import CovariateMatrix, TargetSummary, WeightSolution
from pycalibra.estimators import EstimateReport

from .simulation import TABLE_COLUMNS, SimRow, rows_to_frame

logger = logging.getLogger(__name__)


def _fmt(value: float) -> str:
    return "" if value is None or not np.isfinite(value) else f"{value:.3f}"


def format_weights(solution: WeightSolution, data: CovariateMatrix, target: TargetSummary) -> str:
    """Balance table: target mean, weighted mean and imbalance per covariate"""
    names = data.names or tuple(f"x{j + 1}" for j in range(data.p))
    rows = [[name, target.xbar0[j], float(solution.weights @ data.x[:, j]), solution.imbalance[j]]
            for j, name in enumerate(names)]
    table = tabulate(rows, headers=["covariate", "target", "weighted", "imbalance"], floatfmt=".6g")
    status = "converged" if solution.converged else "NOT converged"
    return (f"{table}\n\nmethod {solution.method.value}, {status} in {solution.iterations} iterations, "
            f"ESS {solution.ess:.1f} of {data.n}")


def format_report(report: EstimateReport) -> str:
    rows = []
    for method, se in report.se_by_method.items():
        lo, hi = report.ci95_by_method[method]
        rows.append([method, se, lo, hi, report.se_augmented_by_method.get(method)])
    header = (f"{report.estimand.kind.value}: {report.estimate:.6g} "
              f"(unadjusted {report.unadjusted_estimate:.6g}, ESS {report.weights_used.ess:.1f})")
    lines = [header]
    if rows:
        lines.append(tabulate(rows, headers=["variance", "SE", "CI95 low", "CI95 high", "SE + target"],
                              floatfmt=".4f", missingval=""))
    if report.bootstrap_failures:
        lines.append(f"bootstrap: {report.bootstrap_failures} replicates failed and were dropped")
    lines += [f"note: {c}" for c in report.caveats]
    return "\n".join(lines)


def format_sim_rows(rows: Sequence[SimRow]) -> str:
    """One line per scenario with the summary columns"""
    frame = rows_to_frame(rows)
    body = [[r[c] if c in ("block", "n1", "p", "solver_failures", "bootstrap_failures", "degenerate")
             else _fmt(r[c]) for c in TABLE_COLUMNS] for _, r in frame.iterrows()]
    return tabulate(body, headers=TABLE_COLUMNS, disable_numparse=True)


def summarize_comparison(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean, SD and quartiles of the error per scenario and method"""
    grouped = frame.groupby(["scenario", "method"], sort=False)["error"]
    summary = grouped.agg(mean="mean", sd="std", q1=lambda e: e.quantile(0.25), median="median",
                          q3=lambda e: e.quantile(0.75), failed=lambda e: int(e.isna().sum()))
    return summary.reset_index()


def format_comparison(frame: pd.DataFrame) -> str:
    summary = summarize_comparison(frame)
    return tabulate(summary.values.tolist(), headers=list(summary.columns), floatfmt=".4f")
