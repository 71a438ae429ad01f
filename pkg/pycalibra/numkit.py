"""Numerical kernels shared by the weight solvers

Quasi-Newton minimization, an active-set QP solver, scalar and vector root
finders, QR least squares and a splittable counter-based random stream.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy import linalg, optimize

from .exceptions import BracketError, DimensionError, DomainError, QPInfeasibleError, SingularFitError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

ARMIJO_SLOPE = 1e-4
STEP_CONTRACTION = 0.5
_MIN_STEP = 1e-20
_ROUNDOFF = 64 * np.finfo(float).eps
_UINT64 = 1 << 64


@dataclass(frozen=True)
class OptimControl:
    """Iteration controls shared by every iterative kernel"""

    max_iterations: int = 300
    """Hard cap on outer iterations"""
    relative_tolerance: float = 1e-8
    """Stall test on objective and iterate changes"""
    gradient_tolerance: float = 1e-8
    """Convergence test on the max-norm of the gradient (or residual)"""

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise DomainError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not (self.relative_tolerance > 0 and self.gradient_tolerance > 0):
            raise DomainError("tolerances must be positive")

    def scaled(self, factor: float) -> "OptimControl":
        """Same control with the gradient tolerance multiplied by `factor`"""
        return OptimControl(self.max_iterations, self.relative_tolerance, self.gradient_tolerance * factor)


@dataclass(frozen=True)
class OptimResult:
    """Outcome of `minimize_smooth` or `newton_system`"""

    argmin: FloatArray
    objective_value: float
    converged: bool
    iterations: int
    gradient_norm: float


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream addressed by (seed, stream_id)

    Streams are Philox generators keyed through a SeedSequence spawn key, so
    children never overlap and the draws of one stream do not depend on how
    many other streams were consumed before it.
    """

    seed: int
    stream_id: int = 0
    parent_key: Tuple[int, ...] = field(default=())
    """Stream ids of the ancestors, outermost first"""

    def __post_init__(self):
        for value in (self.seed, self.stream_id, *self.parent_key):
            if not 0 <= int(value) < _UINT64:
                raise DomainError(f"seed and stream ids must be 64-bit unsigned integers, got {value}")

    @property
    def spawn_key(self) -> Tuple[int, ...]:
        return self.parent_key + (self.stream_id,)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream"""
        seq = np.random.SeedSequence(int(self.seed), spawn_key=self.spawn_key)
        return np.random.Generator(np.random.Philox(seq))

    def child(self, stream_id: int) -> "RngStream":
        """Independent sub-stream, e.g. one per simulation run or bootstrap replicate"""
        return RngStream(self.seed, int(stream_id), self.spawn_key)


def _max_norm(v: FloatArray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def minimize_smooth(objective: Callable[[FloatArray], float],
                    gradient: Callable[[FloatArray], FloatArray],
                    start: Sequence[float],
                    control: OptimControl = OptimControl()) -> OptimResult:
    """Minimize a smooth convex function with BFGS and Armijo backtracking

    Args:
        objective: f(x)
        gradient: grad f(x)
        start: initial point
        control: iteration cap and tolerances

    Returns:
        OptimResult: `converged` is True iff the gradient max-norm reached
        `control.gradient_tolerance`. Reaching the iteration cap or stalling
        returns the last iterate with `converged=False`.
    """
    x = np.array(start, dtype=float)
    if x.ndim != 1:
        raise DimensionError(f"start must be a vector, got shape {x.shape}")
    f = float(objective(x))
    g = np.asarray(gradient(x), dtype=float)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise DomainError("objective or gradient is not finite at the starting point")

    n = x.size
    identity = np.eye(n)
    h_inv = identity.copy()
    gnorm = _max_norm(g)
    iterations = 0

    while gnorm > control.gradient_tolerance and iterations < control.max_iterations:
        direction = -h_inv @ g
        slope = float(g @ direction)
        if slope >= 0:
            # lost positive definiteness; restart from steepest descent
            h_inv = identity.copy()
            direction = -g
            slope = float(-(g @ g))

        t = 1.0
        x_new = g_new = None
        f_new = np.inf
        while t >= _MIN_STEP:
            candidate = x + t * direction
            f_candidate = float(objective(candidate))
            if np.isfinite(f_candidate):
                if f_candidate <= f + ARMIJO_SLOPE * t * slope:
                    x_new, f_new = candidate, f_candidate
                    break
                if abs(f_candidate - f) <= _ROUNDOFF * (1.0 + abs(f)):
                    # decrease is below rounding; accept when the gradient improves
                    g_candidate = np.asarray(gradient(candidate), dtype=float)
                    if _max_norm(g_candidate) < gnorm:
                        x_new, f_new, g_new = candidate, f_candidate, g_candidate
                        break
            t *= STEP_CONTRACTION

        if x_new is None:
            logger.debug(f"[BFGS] line search failed at iteration {iterations}, gradient norm {gnorm:.3e}")
            break
        if g_new is None:
            g_new = np.asarray(gradient(x_new), dtype=float)
        if not np.all(np.isfinite(g_new)):
            logger.debug(f"[BFGS] non-finite gradient at iteration {iterations}")
            break

        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if iterations == 0:
                h_inv = identity * (sy / float(y @ y))
            rho = 1.0 / sy
            left = identity - rho * np.outer(s, y)
            h_inv = left @ h_inv @ left.T + rho * np.outer(s, s)

        stalled = (abs(f - f_new) <= control.relative_tolerance * (abs(f) + control.relative_tolerance)
                   and _max_norm(s) <= control.relative_tolerance * (1.0 + _max_norm(x)))
        x, f, g = x_new, f_new, g_new
        gnorm = _max_norm(g)
        iterations += 1
        if stalled:
            break

    converged = gnorm <= control.gradient_tolerance
    logger.debug(f"[BFGS] stop after {iterations} iterations, f={f:.10g}, |g|={gnorm:.3e}, converged={converged}")
    return OptimResult(argmin=x, objective_value=f, converged=converged, iterations=iterations, gradient_norm=gnorm)


@dataclass(frozen=True)
class QPResult:
    """Solution of `solve_qp`"""

    x: FloatArray
    """Minimizer"""
    equality_multipliers: FloatArray
    inequality_multipliers: FloatArray
    """One per stacked inequality row (nonnegativity rows first, then balance lower, balance upper); zero when inactive"""
    active: npt.NDArray[np.bool_]
    iterations: int
    converged: bool


def _kkt_solve(q: FloatArray, c: FloatArray, a: FloatArray, b: FloatArray) -> Tuple[FloatArray, FloatArray]:
    """Minimize 0.5 x'Qx + c'x subject to Ax = b; returns (x, multipliers) with Qx + c = A'lambda"""
    n = q.shape[0]
    m = a.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = q
    kkt[:n, n:] = -a.T
    kkt[n:, :n] = a
    rhs = np.concatenate([-c, b])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _independent_rows(base: FloatArray, rows: FloatArray, candidates: Sequence[int]) -> list:
    """Greedy subset of `candidates` whose rows stay linearly independent of `base`"""
    chosen: list = []
    stacked = base
    rank = np.linalg.matrix_rank(stacked) if stacked.size else 0
    full = np.vstack([stacked, rows[list(candidates)]]) if len(candidates) else stacked
    if full.size and np.linalg.matrix_rank(full) == rank + len(candidates):
        return list(candidates)
    for idx in candidates:
        trial = np.vstack([stacked, rows[idx:idx + 1]])
        trial_rank = np.linalg.matrix_rank(trial)
        if trial_rank > rank:
            chosen.append(idx)
            stacked, rank = trial, trial_rank
    return chosen


def _feasible_start(x_eq: FloatArray, e_mat: FloatArray, e_vec: FloatArray,
                    g_mat: FloatArray, h_vec: FloatArray, families: Sequence[str]) -> FloatArray:
    """Feasible point closest in L1 to the equality-constrained minimizer"""
    n = x_eq.size
    eye = np.eye(n)
    # variables (x, t): minimize sum t with t >= |x - x_eq|
    cost = np.concatenate([np.zeros(n), np.ones(n)])
    a_ub = [np.hstack([eye, -eye]), np.hstack([-eye, -eye])]
    b_ub = [x_eq, -x_eq]
    if g_mat.shape[0]:
        a_ub.append(np.hstack([-g_mat, np.zeros((g_mat.shape[0], n))]))
        b_ub.append(-h_vec)
    a_eq = np.hstack([e_mat, np.zeros((e_mat.shape[0], n))]) if e_mat.shape[0] else None
    res = optimize.linprog(cost, A_ub=np.vstack(a_ub), b_ub=np.concatenate(b_ub),
                           A_eq=a_eq, b_eq=e_vec if a_eq is not None else None,
                           bounds=[(None, None)] * (2 * n), method="highs")
    if res.status == 0:
        return np.asarray(res.x[:n], dtype=float)
    if res.status != 2:
        raise QPInfeasibleError("phase1", f"feasibility search failed: {res.message}")

    # name the first family whose addition empties the region
    seen: list = []
    for family in dict.fromkeys(families):
        seen.append(family)
        mask = np.array([f in seen for f in families])
        probe = optimize.linprog(np.zeros(n), A_ub=-g_mat[mask], b_ub=-h_vec[mask],
                                 A_eq=e_mat if e_mat.shape[0] else None,
                                 b_eq=e_vec if e_mat.shape[0] else None,
                                 bounds=[(None, None)] * n, method="highs")
        if probe.status == 2:
            raise QPInfeasibleError(family)
    raise QPInfeasibleError(families[-1] if len(families) else "equality")


def solve_qp(quadratic_weight: npt.ArrayLike,
             linear_term: npt.ArrayLike,
             equality: Tuple[npt.ArrayLike, npt.ArrayLike] | None = None,
             inequality_ge0: Sequence[int] | None = None,
             box_residuals: Tuple[npt.ArrayLike, npt.ArrayLike, npt.ArrayLike] | None = None,
             control: OptimControl = OptimControl()) -> QPResult:
    """Strictly convex QP by primal active-set iteration

    minimize 0.5 x'Qx + c'x
    subject to E x = e, x_i >= 0 for i in `inequality_ge0`,
    |M x - center| <= half_width elementwise for `box_residuals=(M, center, half_width)`.

    The iteration starts from the equality-constrained minimizer; if that point
    is infeasible it is first moved to the L1-closest feasible point. Box rows
    with zero half width are treated as equalities.

    Raises:
        QPInfeasibleError: the feasible region is empty; `family` names the
            first of "equality", "nonnegativity", "balance" responsible.
    """
    q = np.asarray(quadratic_weight, dtype=float)
    c = np.asarray(linear_term, dtype=float)
    n = c.size
    if q.shape != (n, n):
        raise DimensionError(f"quadratic_weight must be {n}x{n}, got {q.shape}")

    e_rows = [np.zeros((0, n))]
    e_vals = [np.zeros(0)]
    if equality is not None:
        e_rows.append(np.atleast_2d(np.asarray(equality[0], dtype=float)))
        e_vals.append(np.atleast_1d(np.asarray(equality[1], dtype=float)))

    g_rows = [np.zeros((0, n))]
    h_vals = [np.zeros(0)]
    families: list = []
    if inequality_ge0 is not None and len(inequality_ge0):
        idx = np.asarray(inequality_ge0, dtype=int)
        g_rows.append(np.eye(n)[idx])
        h_vals.append(np.zeros(idx.size))
        families += ["nonnegativity"] * idx.size
    if box_residuals is not None:
        m_mat = np.atleast_2d(np.asarray(box_residuals[0], dtype=float))
        center = np.atleast_1d(np.asarray(box_residuals[1], dtype=float))
        half = np.broadcast_to(np.asarray(box_residuals[2], dtype=float), center.shape)
        if np.any(half < 0):
            raise DomainError("box half widths must be nonnegative")
        exact = half == 0
        if np.any(exact):
            e_rows.append(m_mat[exact])
            e_vals.append(center[exact])
        slack = ~exact
        g_rows += [m_mat[slack], -m_mat[slack]]
        h_vals += [center[slack] - half[slack], -center[slack] - half[slack]]
        families += ["balance"] * (2 * int(slack.sum()))

    e_mat, e_vec = np.vstack(e_rows), np.concatenate(e_vals)
    g_mat, h_vec = np.vstack(g_rows), np.concatenate(h_vals)
    n_ineq = g_mat.shape[0]

    if e_mat.shape[0]:
        ls = np.linalg.lstsq(e_mat, e_vec, rcond=None)[0]
        if _max_norm(e_mat @ ls - e_vec) > 1e-9 * (1.0 + _max_norm(e_vec)):
            raise QPInfeasibleError("equality")
        e_keep = _independent_rows(np.zeros((0, n)), e_mat, range(e_mat.shape[0]))
        e_mat, e_vec = e_mat[e_keep], e_vec[e_keep]

    x_eq, _ = _kkt_solve(q, c, e_mat, e_vec)
    scale_x = 1.0 + _max_norm(x_eq)
    feas_tol = 1e-12 * scale_x

    if n_ineq == 0 or np.all(g_mat @ x_eq - h_vec >= -feas_tol):
        x = x_eq
    else:
        logger.debug(f"[ActiveSetQP] equality-constrained minimizer infeasible, running phase 1")
        x = _feasible_start(x_eq, e_mat, e_vec, g_mat, h_vec, families)

    slack = g_mat @ x - h_vec
    start_active = [i for i in np.argsort(slack) if slack[i] <= 1e-9 * scale_x]
    working = _independent_rows(e_mat, g_mat, start_active)

    max_iter = max(control.max_iterations, 10 * (n + n_ineq) + 100)
    multipliers = np.zeros(e_mat.shape[0])
    mu = np.zeros(0)
    converged = False
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        a_mat = np.vstack([e_mat, g_mat[working]]) if working else e_mat
        b_vec = np.concatenate([e_vec, h_vec[working]]) if working else e_vec
        x_target, lam = _kkt_solve(q, c, a_mat, b_vec)
        step = x_target - x
        step_norm = np.linalg.norm(step)

        alpha, blocking = 1.0, None
        if step_norm > 0 and n_ineq:
            gp = g_mat @ step
            row_norms = np.linalg.norm(g_mat, axis=1)
            in_working = np.zeros(n_ineq, dtype=bool)
            in_working[working] = True
            candidates = np.where(~in_working & (gp < -1e-12 * row_norms * step_norm))[0]
            if candidates.size:
                ratios = np.maximum((h_vec[candidates] - g_mat[candidates] @ x) / gp[candidates], 0.0)
                k = int(np.argmin(ratios))
                if ratios[k] < 1.0:
                    alpha, blocking = float(ratios[k]), int(candidates[k])

        if blocking is not None:
            x = x + alpha * step
            working.append(blocking)
            continue

        x = x_target
        multipliers = lam[:e_mat.shape[0]]
        mu = lam[e_mat.shape[0]:]
        if mu.size == 0:
            converged = True
            break
        tol = 1e-12 * max(1.0, _max_norm(lam))
        worst = int(np.argmin(mu))
        if mu[worst] >= -tol:
            converged = True
            break
        working.pop(worst)

    if not converged:
        logger.warning(f"[ActiveSetQP] iteration cap {max_iter} reached")

    ineq_mult = np.zeros(n_ineq)
    if working and mu.size == len(working):
        ineq_mult[working] = np.maximum(mu, 0.0)
    active = np.zeros(n_ineq, dtype=bool)
    active[working] = True
    logger.debug(f"[ActiveSetQP] {iterations} iterations, {len(working)} active inequalities")
    return QPResult(x=x, equality_multipliers=multipliers, inequality_multipliers=ineq_mult,
                    active=active, iterations=iterations, converged=converged)


def find_root_scalar(g: Callable[[float], float],
                     bracket: Tuple[float, float],
                     control: OptimControl = OptimControl()) -> float:
    """Root of a monotone scalar function inside a sign-changing bracket (Brent's method)"""
    lo, hi = float(bracket[0]), float(bracket[1])
    g_lo, g_hi = float(g(lo)), float(g(hi))
    if not (np.isfinite(g_lo) and np.isfinite(g_hi)):
        raise DomainError("function is not finite at the bracket ends")
    if g_lo == 0.0:
        return lo
    if g_hi == 0.0:
        return hi
    if g_lo * g_hi > 0:
        raise BracketError(f"no sign change on [{lo}, {hi}]: g(lo)={g_lo:.3g}, g(hi)={g_hi:.3g}")
    root = optimize.brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                           maxiter=max(control.max_iterations, 100))
    residual = abs(float(g(root)))
    if residual > control.gradient_tolerance:
        logger.warning(f"[RootFinder] residual {residual:.3e} above tolerance at {root:.12g}")
    return float(root)


def newton_system(fun: Callable[[FloatArray], FloatArray],
                  jacobian: Callable[[FloatArray], FloatArray],
                  start: Sequence[float],
                  control: OptimControl = OptimControl(),
                  admissible: Callable[[FloatArray], bool] | None = None) -> OptimResult:
    """Damped Newton iteration for F(x) = 0

    Steps are halved until the iterate is admissible and 0.5|F|^2 decreases
    sufficiently. `objective_value` of the result is the final residual max-norm.
    """
    x = np.array(start, dtype=float)
    f_val = np.asarray(fun(x), dtype=float)
    if not np.all(np.isfinite(f_val)):
        raise DomainError("residual is not finite at the starting point")
    merit = 0.5 * float(f_val @ f_val)
    norm = _max_norm(f_val)
    iterations = 0
    while norm > control.gradient_tolerance and iterations < control.max_iterations:
        jac = np.asarray(jacobian(x), dtype=float)
        try:
            step = np.linalg.solve(jac, -f_val)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -f_val, rcond=None)[0]
        t = 1.0
        accepted = False
        while t >= 1e-12:
            candidate = x + t * step
            if admissible is None or admissible(candidate):
                f_candidate = np.asarray(fun(candidate), dtype=float)
                if np.all(np.isfinite(f_candidate)):
                    merit_candidate = 0.5 * float(f_candidate @ f_candidate)
                    if merit_candidate <= (1.0 - 2.0 * ARMIJO_SLOPE * t) * merit or \
                            merit_candidate <= _ROUNDOFF * merit:
                        accepted = True
                        break
            t *= 0.5
        if not accepted:
            logger.debug(f"[Newton] step halving exhausted at iteration {iterations}, residual {norm:.3e}")
            break
        x, f_val, merit = candidate, f_candidate, merit_candidate
        norm = _max_norm(f_val)
        iterations += 1
    converged = norm <= control.gradient_tolerance
    return OptimResult(argmin=x, objective_value=norm, converged=converged, iterations=iterations, gradient_norm=norm)


def least_squares_qr(design: npt.ArrayLike, response: npt.ArrayLike, rank_tolerance: float = 1e-10) -> Tuple[FloatArray, FloatArray]:
    """Ordinary least squares through a reduced QR factorization

    Returns:
        (coefficients, fitted values)

    Raises:
        SingularFitError: some |R_jj| <= rank_tolerance * |X|
    """
    x = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise DimensionError(f"design {x.shape} does not match response of length {y.size}")
    if x.shape[0] < x.shape[1]:
        raise SingularFitError(f"{x.shape[0]} rows cannot identify {x.shape[1]} coefficients")
    q_mat, r_mat = np.linalg.qr(x, mode="reduced")
    threshold = rank_tolerance * np.linalg.norm(x)
    if np.any(np.abs(np.diag(r_mat)) <= threshold):
        raise SingularFitError("design matrix is rank deficient")
    coef = linalg.solve_triangular(r_mat, q_mat.T @ y)
    return coef, x @ coef
