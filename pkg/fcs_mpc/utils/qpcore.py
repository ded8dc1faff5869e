"""Small dense convex QP solver and semi-continuous enumeration.

Problems have the form

    minimize    1/2 x'Qx + c'x + offset
    subject to  a_ineq x <= b_ineq
                a_eq x    = b_eq
                lb <= x <= ub

with Q symmetric positive semidefinite. The solver is a primal active-set
method working in the null space of the working constraints. A feasible start
comes from the caller, from clipping zero into the bounds, or from a HiGHS
phase-1 LP.
"""
from dataclasses import dataclass, replace
import itertools
from typing import Callable, Dict, Optional, Sequence, Tuple
import warnings

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog


OPTIMAL = "optimal"
INFEASIBLE = "infeasible"


class QpError(ValueError):
    pass


class QpCapacityError(QpError):
    pass


@dataclass(frozen=True)
class Tolerances:
    feasibility: float = 1e-9
    kkt: float = 1e-8
    symmetry: float = 1e-12
    psd: float = 1e-9
    # Reduced-Hessian eigenvalues below curvature * max eigenvalue count as 0
    curvature: float = 1e-13
    step: float = 1e-12
    tie: float = 1e-12
    phase1: float = 1e-10
    max_iter: int = 500
    max_semicontinuous: int = 12


TOLERANCES = Tolerances()


def _as_rows(a, n):
    if a is None:
        return np.zeros((0, n))
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, n) if a.size else np.zeros((0, n))


def _as_vector(v, m, fill):
    if v is None:
        return np.full(m, fill)
    return np.asarray(v, dtype=float).reshape(-1)


@dataclass
class QpProblem:
    Q: np.ndarray
    c: np.ndarray
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    a_ineq: Optional[np.ndarray] = None
    b_ineq: Optional[np.ndarray] = None
    a_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    offset: float = 0.

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise QpError(f"Q must be square, got shape {Q.shape}")
        self.Q = Q
        self.c = _as_vector(self.c, n, 0.)
        self.lb = _as_vector(self.lb, n, -np.inf)
        self.ub = _as_vector(self.ub, n, np.inf)
        self.a_ineq = _as_rows(self.a_ineq, n)
        self.b_ineq = _as_vector(self.b_ineq, self.a_ineq.shape[0], 0.)
        self.a_eq = _as_rows(self.a_eq, n)
        self.b_eq = _as_vector(self.b_eq, self.a_eq.shape[0], 0.)
        self.offset = float(self.offset)

        for name, v in [("c", self.c), ("lb", self.lb), ("ub", self.ub)]:
            if v.shape != (n,):
                raise QpError(f"{name} has shape {v.shape}, expected ({n},)")
        if self.b_ineq.shape != (self.a_ineq.shape[0],):
            raise QpError("a_ineq and b_ineq row counts differ")
        if self.b_eq.shape != (self.a_eq.shape[0],):
            raise QpError("a_eq and b_eq row counts differ")
        if np.any(self.lb > self.ub):
            raise QpError("lower bound above upper bound")

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    def objective(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q @ x + self.c @ x + self.offset)


@dataclass(frozen=True)
class QpSolution:
    x: Optional[np.ndarray]
    objective: float
    status: str
    kkt_residual: float = np.inf
    iterations: int = 0
    pattern: Optional[Tuple[int, ...]] = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


@dataclass(frozen=True)
class SemiContinuousSpec:
    """Per-variable on-intervals. A listed variable is either 0 or inside
    its [lo, hi] interval. `order` sets the enumeration order of the
    variables, ascending index when empty."""
    intervals: Dict[int, Tuple[float, float]]
    order: Tuple[int, ...] = ()

    def __post_init__(self):
        for i, (lo, hi) in self.intervals.items():
            if not 0. < lo <= hi:
                raise QpError(f"semi-continuous variable {i}: need 0 < lo <= hi,"
                              f" got [{lo}, {hi}]")
        if self.order and sorted(self.order) != sorted(self.intervals):
            raise QpError("order must list every semi-continuous variable once")

    @property
    def variables(self) -> Tuple[int, ...]:
        return tuple(self.order) if self.order else tuple(sorted(self.intervals))


_INFEASIBLE = QpSolution(x=None, objective=np.inf, status=INFEASIBLE)


def _check_problem(p: QpProblem, tol: Tolerances):
    if p.n == 0:
        return
    scale = max(1., np.abs(p.Q).max())
    if np.abs(p.Q - p.Q.T).max() > tol.symmetry * scale:
        raise QpError("Q is not symmetric")
    if np.linalg.eigvalsh(p.Q).min() < -tol.psd * scale:
        raise QpError("Q is not positive semidefinite")


def _constraint_rows(p: QpProblem, tol: Tolerances):
    """Stack bounds into the general constraints. Pinned variables
    (lb == ub) become equality rows."""
    eye = np.eye(p.n)
    finite = np.isfinite(p.lb) & np.isfinite(p.ub)
    pinned = finite & (p.ub - p.lb <= tol.feasibility)
    has_ub = np.isfinite(p.ub) & ~pinned
    has_lb = np.isfinite(p.lb) & ~pinned

    G = np.vstack([p.a_ineq, eye[has_ub], -eye[has_lb]])
    h = np.concatenate([p.b_ineq, p.ub[has_ub], -p.lb[has_lb]])
    E = np.vstack([p.a_eq, eye[pinned]])
    f = np.concatenate([p.b_eq, 0.5 * (p.lb[pinned] + p.ub[pinned])])
    return G, h, E, f


def _max_violation(x, G, h, E, f) -> float:
    v = 0.
    if len(h):
        v = max(v, float((G @ x - h).max()))
    if len(f):
        v = max(v, float(np.abs(E @ x - f).max()))
    return v


def _initial_point(p, G, h, E, f, x0, tol):
    candidates = [] if x0 is None else [np.asarray(x0, dtype=float)]
    candidates.append(np.clip(np.zeros(p.n), p.lb, p.ub))
    for x in candidates:
        if x.shape == (p.n,) and _max_violation(x, G, h, E, f) <= tol.feasibility:
            return x.copy()

    res = linprog(np.zeros(p.n),
                  A_ub=G if len(h) else None, b_ub=h if len(h) else None,
                  A_eq=E if len(f) else None, b_eq=f if len(f) else None,
                  bounds=[(None, None)] * p.n, method="highs",
                  options={"primal_feasibility_tolerance": tol.phase1})
    if res.status == 2:
        return None
    if res.status != 0 or res.x is None:
        warnings.warn(f"Phase-1 LP failed ({res.message}); treating the QP "
                      "as infeasible")
        return None
    return np.asarray(res.x, dtype=float)


def _initial_working_set(x, G, h, E, tol):
    W = []
    base = E
    rank = np.linalg.matrix_rank(base) if len(base) else 0
    for i in np.flatnonzero(np.abs(G @ x - h) <= tol.feasibility):
        trial = np.vstack([base, G[i]])
        r = np.linalg.matrix_rank(trial)
        if r > rank:
            W.append(int(i))
            base, rank = trial, r
    return W


def _kkt_scale(p: QpProblem, x: np.ndarray) -> float:
    """max(1, |Q|_inf |x|_inf, |c|_inf). Stationarity and dual residuals are
    measured relative to it."""
    if p.n == 0:
        return 1.
    q_norm = float(np.abs(p.Q).sum(axis=1).max())
    return max(1., q_norm * float(np.abs(x).max()), float(np.abs(p.c).max()))


def _direction(Q, g, Z, tol, g_scale):
    """Step within the null space Z. Returns (step, newton): a Newton step on
    the curved subspace, or a descent ray along zero-curvature directions."""
    n = len(g)
    if Z.shape[1] == 0:
        return np.zeros(n), True
    H = Z.T @ Q @ Z
    H = 0.5 * (H + H.T)
    r = Z.T @ g
    eigval, eigvec = np.linalg.eigh(H)
    flat = eigval <= tol.curvature * max(float(eigval.max()), 1.)

    if flat.any():
        r_flat = eigvec[:, flat].T @ r
        if np.abs(r_flat).max() > tol.step * g_scale:
            return Z @ (-eigvec[:, flat] @ r_flat), False

    curved = ~flat
    v = -eigvec[:, curved] @ ((eigvec[:, curved].T @ r) / eigval[curved])
    return Z @ v, True


def _active_set(p, G, h, E, f, x, tol):
    W = _initial_working_set(x, G, h, E, tol)
    row_norms = np.linalg.norm(G, axis=1) if len(h) else np.zeros(0)

    for it in range(1, tol.max_iter + 1):
        A = np.vstack([E, G[W]]) if W else E
        b = np.concatenate([f, h[W]]) if W else f
        if len(b):
            # Keep the working constraints exact
            x = x + np.linalg.lstsq(A, b - A @ x, rcond=None)[0]
        g = p.Q @ x + p.c
        scale = _kkt_scale(p, x)
        Z = null_space(A) if len(b) else np.eye(p.n)
        # Stationarity residual left after fitting the working-set multipliers
        reduced = float(np.abs(Z @ (Z.T @ g)).max(initial=0.))
        step, newton = _direction(p.Q, g, Z, tol, scale)

        size = float(np.abs(step).max(initial=0.))
        stalled = newton and \
            size <= tol.step * max(1., float(np.abs(x).max(initial=0.)))
        if reduced <= 0.5 * tol.kkt * scale or stalled:
            lam = np.linalg.lstsq(A.T, -g, rcond=None)[0] if len(b) else np.zeros(0)
            mu = lam[len(f):]
            if mu.size == 0 or mu.min() >= -tol.kkt * scale:
                return x, W, lam, it
            W.pop(int(np.argmin(mu)))
            continue

        # Ratio test against constraints outside the working set
        Gs = G @ step
        alpha, block = (1. if newton else np.inf), None
        for i in range(len(h)):
            if i in W or Gs[i] <= tol.step * row_norms[i] * size:
                continue
            a_i = max(0., h[i] - G[i] @ x) / Gs[i]
            if a_i < alpha:
                alpha, block = a_i, i
        if not np.isfinite(alpha):
            raise QpError("QP is unbounded below")
        x = x + alpha * step
        if block is not None:
            W.append(block)

    raise QpError(f"Active-set method did not converge in {tol.max_iter} "
                  "iterations")


def _kkt_residual(p, x, G, h, E, f, nu, mu) -> float:
    scale = _kkt_scale(p, x)
    stationarity = p.Q @ x + p.c
    if len(f):
        stationarity = stationarity + E.T @ nu
    if len(h):
        stationarity = stationarity + G.T @ mu
    slack = G @ x - h if len(h) else np.zeros(0)
    residuals = [
        float(np.abs(stationarity).max(initial=0.)) / scale,
        _max_violation(x, G, h, E, f),
        float(np.maximum(-mu, 0.).max(initial=0.)) / scale,
        float(np.abs(mu * slack).max(initial=0.)) / scale,
    ]
    return max(residuals)


def kkt_report(problem: QpProblem, x: np.ndarray,
               tol: Tolerances = TOLERANCES) -> float:
    """KKT residual of a candidate point, with multipliers fitted by least
    squares on the constraints active at x."""
    x = np.asarray(x, dtype=float)
    G, h, E, f = _constraint_rows(problem, tol)
    active = np.flatnonzero(np.abs(G @ x - h) <= tol.feasibility) if len(h) \
        else np.zeros(0, dtype=int)
    A = np.vstack([E, G[active]])
    g = problem.Q @ x + problem.c
    lam = np.linalg.lstsq(A.T, -g, rcond=None)[0] if len(A) else np.zeros(0)
    mu = np.zeros(len(h))
    mu[active] = lam[len(f):]
    return _kkt_residual(problem, x, G, h, E, f, lam[:len(f)], mu)


def _solve_checked(problem, x0, tol) -> QpSolution:
    G, h, E, f = _constraint_rows(problem, tol)
    x = _initial_point(problem, G, h, E, f, x0, tol)
    if x is None:
        return _INFEASIBLE
    x, W, lam, iterations = _active_set(problem, G, h, E, f, x, tol)

    nu = lam[:len(f)]
    mu = np.zeros(len(h))
    mu[W] = lam[len(f):]
    residual = _kkt_residual(problem, x, G, h, E, f, nu, mu)
    if residual > tol.kkt:
        warnings.warn(f"QP solution has KKT residual {residual:.2e} above "
                      f"tolerance {tol.kkt:.0e}")
    return QpSolution(x=x, objective=problem.objective(x), status=OPTIMAL,
                      kkt_residual=residual, iterations=iterations)


def solve_qp(problem: QpProblem, x0: Optional[np.ndarray] = None,
             tol: Tolerances = TOLERANCES) -> QpSolution:
    """Solve a convex QP.

    Args:
        problem (QpProblem): Problem data, Q must be PSD
        x0 (np.ndarray): Optional feasible starting point, skips phase 1
        tol (Tolerances): Numerical tolerances

    Returns:
        solution (QpSolution): status 'optimal' with the minimizer and its KKT
                               residual, or status 'infeasible'
    """
    _check_problem(problem, tol)
    return _solve_checked(problem, x0, tol)


def _fix_pattern(problem: QpProblem, spec: SemiContinuousSpec,
                 on: Sequence[int]) -> QpProblem:
    lb, ub = problem.lb.copy(), problem.ub.copy()
    for i, (lo, hi) in spec.intervals.items():
        if i in on:
            lb[i], ub[i] = lo, hi
        else:
            lb[i], ub[i] = 0., 0.
    return replace(problem, lb=lb, ub=ub)


def solve_semicontinuous(
        problem: QpProblem, spec: SemiContinuousSpec,
        pattern_start: Optional[Callable[[Tuple[int, ...]], Optional[np.ndarray]]] = None,
        pattern_bound: Optional[Callable[[Tuple[int, ...]], float]] = None,
        tol: Tolerances = TOLERANCES) -> QpSolution:
    """Exact minimizer over all on/off patterns of the semi-continuous
    variables.

    Patterns are visited with more variables on first, then in lexicographic
    order over `spec.variables`; a later pattern replaces the incumbent only
    if it is strictly better.

    Args:
        problem (QpProblem): Continuous problem
        spec (SemiContinuousSpec): On-intervals of the semi-continuous variables
        pattern_start (callable): Optional. Maps the tuple of on-indices to a
                                  feasible start point, or None when the
                                  pattern is known to be infeasible
        pattern_bound (callable): Optional. Maps the tuple of on-indices to a
                                  lower bound on that pattern's objective
        tol (Tolerances): Numerical tolerances

    Returns:
        solution (QpSolution): Best pattern's solution, `pattern` holds the
                               on-indices in `spec.variables` order
    """
    k = len(spec.intervals)
    if k > tol.max_semicontinuous:
        raise QpCapacityError(f"{k} semi-continuous variables, at most "
                              f"{tol.max_semicontinuous} supported")
    if any(not 0 <= i < problem.n for i in spec.intervals):
        raise QpError("semi-continuous variable index out of range")
    _check_problem(problem, tol)

    best = None
    for n_on in range(k, -1, -1):
        for on in itertools.combinations(spec.variables, n_on):
            if best is not None and pattern_bound is not None:
                margin = tol.tie * max(1., abs(best.objective))
                if pattern_bound(on) > best.objective + margin:
                    continue
            x0 = None
            if pattern_start is not None:
                x0 = pattern_start(on)
                if x0 is None:
                    continue
            sol = _solve_checked(_fix_pattern(problem, spec, on), x0, tol)
            if not sol.optimal:
                continue
            if best is None or sol.objective < best.objective \
                    - tol.tie * max(1., abs(best.objective)):
                best = replace(sol, pattern=on)

    return _INFEASIBLE if best is None else best
