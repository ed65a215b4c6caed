"""Convex quadratic programs with box bounds and a few linear inequality rows.

Problems have the form::

    minimize    1/2 v'Qv + c'v
    subject to  lower <= v <= upper,  A v <= b

They are solved by monotone accelerated projected gradient with function-value
restart. The projection onto the box intersected with the rows is exact: the row
multipliers are found by coordinate ascent on the projection dual, each one a
root of a piecewise-linear function located from its sorted breakpoints.

At doubling iteration counts, and once more after convergence, the iterate is
polished: the equality-constrained QP on its active face (free coordinates,
binding rows) is solved directly and the result replaces the iterate when it is
feasible and no worse. The polished point does not depend on the scale of Q and c.
"""

import logging
import typing as t
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, LinAlgWarning, eigvalsh
from scipy.linalg import solve as solve_linear

from config import SOLVER_SETTINGS

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10


class QpError(Exception):
    """Raise if a quadratic program is malformed."""


class QpInfeasibleError(QpError):
    """Raise if the feasible region is empty."""


class QpNonConvexError(QpError):
    """Raise if negative curvature is found along an iterate direction."""


@dataclass(frozen=True)
class QpProblem:
    """A convex QP with box bounds and rows ``ineq_rows @ v <= ineq_bounds``."""

    q_matrix: np.ndarray
    linear: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ineq_rows: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    ineq_bounds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        """Coerce arrays and check shapes, bounds and symmetry."""
        q_matrix = np.asarray(self.q_matrix, dtype=float)
        p = q_matrix.shape[0] if q_matrix.ndim == 2 else -1
        if p < 1 or q_matrix.shape != (p, p):
            raise QpError("q_matrix must be a non-empty square matrix")
        scale = max(1.0, float(np.max(np.abs(q_matrix))))
        if np.max(np.abs(q_matrix - q_matrix.T)) > SYMMETRY_TOL * scale:
            raise QpError("q_matrix is not symmetric")

        vectors = {}
        for name in ("linear", "lower", "upper"):
            vector = np.asarray(getattr(self, name), dtype=float)
            if vector.shape != (p,):
                raise QpError(f"{name} must have length {p}")
            vectors[name] = vector
        if np.any(vectors["lower"] > vectors["upper"]):
            raise QpError("lower bound exceeds upper bound")

        rows = np.asarray(self.ineq_rows, dtype=float)
        if rows.size == 0:
            rows = np.zeros((0, p))
        bounds = np.asarray(self.ineq_bounds, dtype=float).reshape(-1)
        if rows.ndim != 2 or rows.shape[1] != p or bounds.shape != (rows.shape[0],):
            raise QpError("ineq_rows must be r x p with r matching ineq_bounds")

        object.__setattr__(self, "q_matrix", q_matrix)
        object.__setattr__(self, "ineq_rows", rows)
        object.__setattr__(self, "ineq_bounds", bounds)
        for name, vector in vectors.items():
            object.__setattr__(self, name, vector)

    @property
    def size(self) -> int:
        """Number of variables p."""
        return int(self.q_matrix.shape[0])

    def objective(self, v: np.ndarray) -> float:
        """Evaluate 1/2 v'Qv + c'v."""
        return float(0.5 * v @ self.q_matrix @ v + self.linear @ v)

    def violation(self, v: np.ndarray) -> float:
        """Largest bound or row violation at ``v`` (0 when feasible)."""
        worst = max(
            0.0,
            float(np.max(self.lower - v, initial=0.0)),
            float(np.max(v - self.upper, initial=0.0)),
        )
        if self.ineq_rows.shape[0]:
            worst = max(worst, float(np.max(self.ineq_rows @ v - self.ineq_bounds)))
        return worst

    def feasibility_tol(self) -> float:
        """Absolute tolerance on bound and row violations."""
        return SOLVER_SETTINGS.feasibility_tol * (
            1.0 + float(np.max(np.abs(self.ineq_bounds), initial=0.0))
        )


@dataclass(frozen=True)
class QpSolution:  # pylint: disable = too-many-instance-attributes
    """Best iterate plus KKT residuals and the accepted-objective trace."""

    v: np.ndarray
    objective: float
    kkt_stationarity: float
    kkt_feasibility: float
    iterations: int
    converged: bool
    multipliers: np.ndarray
    objective_trace: t.Tuple[float, ...] = ()


class _Projector:
    """Exact Euclidean projection onto the box intersected with the rows."""

    def __init__(self, problem: QpProblem) -> None:
        """Init."""
        self.lower = problem.lower
        self.upper = problem.upper
        self.rows = problem.ineq_rows
        self.bounds = problem.ineq_bounds
        self.tol = problem.feasibility_tol()
        self.multipliers = np.zeros(self.rows.shape[0])

    def _row_value(self, point: np.ndarray, row: np.ndarray, step: float) -> float:
        return float(row @ np.clip(point - step * row, self.lower, self.upper))

    def _row_multiplier(self, point: np.ndarray, row: np.ndarray, bound: float) -> float:
        """Smallest t >= 0 with row . clip(point - t row) <= bound."""
        if self._row_value(point, row, 0.0) <= bound:
            return 0.0
        active = row != 0
        floor = float(
            row[active] @ np.where(row[active] > 0, self.lower[active], self.upper[active])
        )
        if floor > bound + self.tol:
            raise QpInfeasibleError(
                f"row cannot be satisfied inside the box: min {floor:.6g} > {bound:.6g}"
            )
        a = row[active]
        z = point[active]
        breakpoints = np.concatenate(
            [(z - self.lower[active]) / a, (z - self.upper[active]) / a]
        )
        breakpoints = np.unique(breakpoints[breakpoints > 0])
        if breakpoints.size == 0:
            return 0.0

        # row value is non-increasing in t; binary search the first breakpoint at or below bound
        lo, hi = 0, breakpoints.size - 1
        if self._row_value(point, row, breakpoints[hi]) > bound:
            return float(breakpoints[hi])
        while lo < hi:
            mid = (lo + hi) // 2
            if self._row_value(point, row, breakpoints[mid]) <= bound:
                hi = mid
            else:
                lo = mid + 1
        t_hi = float(breakpoints[lo])
        t_lo = float(breakpoints[lo - 1]) if lo > 0 else 0.0
        g_hi = self._row_value(point, row, t_hi)
        g_lo = self._row_value(point, row, t_lo)
        if g_lo <= g_hi:
            return t_hi
        # linear between consecutive breakpoints
        return t_lo + (g_lo - bound) * (t_hi - t_lo) / (g_lo - g_hi)

    def __call__(self, point: np.ndarray) -> np.ndarray:
        """Project ``point``; the row multipliers are kept for warm starts."""
        if self.rows.shape[0] == 0:
            return np.clip(point, self.lower, self.upper)
        lam = self.multipliers.copy()
        for _ in range(SOLVER_SETTINGS.max_projection_sweeps):
            change = 0.0
            for k, (row, bound) in enumerate(zip(self.rows, self.bounds)):
                others = point - self.rows.T @ lam + lam[k] * row
                updated = self._row_multiplier(others, row, bound)
                change = max(change, abs(updated - lam[k]))
                lam[k] = updated
            if change <= 1e-15 * (1.0 + float(np.max(lam))):
                break
        self.multipliers = lam
        return np.clip(point - self.rows.T @ lam, self.lower, self.upper)


def default_tol(problem: QpProblem) -> float:
    """Return 1e-7 * (1 + ||c||_inf)."""
    return SOLVER_SETTINGS.relative_tol * (1.0 + float(np.max(np.abs(problem.linear))))


def _lipschitz(q_matrix: np.ndarray) -> float:
    p = q_matrix.shape[0]
    largest = float(eigvalsh(q_matrix, subset_by_index=[p - 1, p - 1])[0])
    return largest if largest > 0 else 1.0


def solve(
    problem: QpProblem,
    tol: t.Optional[float] = None,
    max_iter: int = SOLVER_SETTINGS.max_iter,
) -> QpSolution:
    """Minimize the problem; deterministic for identical inputs."""
    tol = default_tol(problem) if tol is None else tol
    if not tol > 0:
        raise QpError("tol must be positive")
    p = problem.size
    jitter = SOLVER_SETTINGS.jitter * max(float(np.trace(problem.q_matrix)), 0.0) / p
    q_matrix = problem.q_matrix + jitter * np.eye(p)
    c = problem.linear
    lipschitz = _lipschitz(q_matrix)
    project = _Projector(problem)

    def value(v: np.ndarray, qv: np.ndarray) -> float:
        return float(0.5 * v @ qv + c @ v)

    x = project(np.clip(np.zeros(p), problem.lower, problem.upper))
    if problem.violation(x) > project.tol:
        raise QpInfeasibleError(
            f"feasibility pre-pass failed: violation {problem.violation(x):.3g}"
        )
    qx = q_matrix @ x
    fx = value(x, qx)
    y, qy = x.copy(), qx.copy()
    momentum = 1.0
    trace = [fx]
    converged = False
    polished = False
    next_polish = SOLVER_SETTINGS.polish_start
    iteration = 0

    for iteration in range(1, max_iter + 1):
        z = project(y - (qy + c) / lipschitz)
        qz = q_matrix @ z
        step = z - y
        curvature = float(step @ (qz - qy))
        if curvature < -SOLVER_SETTINGS.curvature_tol * float(step @ step):
            raise QpNonConvexError(f"negative curvature {curvature:.3g} along iterate step")

        if float(np.max(np.abs(lipschitz * step))) <= tol:
            if _stationarity(x, qx, c, lipschitz, project) <= 10 * tol:
                converged = True
                break
            y, qy, momentum = x.copy(), qx.copy(), 1.0
            continue

        fz = value(z, qz)
        if fz <= fx:
            next_momentum = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum**2))
            gamma = (momentum - 1.0) / next_momentum
            # Q y tracked from the last two products; one matvec per iteration
            y = z + gamma * (z - x)
            qy = qz + gamma * (qz - qx)
            x, qx, fx = z, qz, fz
            momentum = next_momentum
        else:
            # restart from the last accepted iterate
            y, qy, momentum = x.copy(), qx.copy(), 1.0
        trace.append(fx)

        if iteration == next_polish:
            next_polish *= 2
            face = _polish(problem, q_matrix, x, fx, lipschitz, project)
            if face is not None:
                x, qx, fx, residual = face
                y, qy, momentum = x.copy(), qx.copy(), 1.0
                trace.append(fx)
                if residual <= tol:
                    converged = polished = True
                    break

    if converged and not polished:
        face = _polish(problem, q_matrix, x, fx, lipschitz, project)
        if face is not None and face[3] <= _stationarity(x, qx, c, lipschitz, project):
            x, qx, fx, _ = face
            trace.append(fx)

    stationarity = _stationarity(x, qx, c, lipschitz, project)
    multipliers = lipschitz * project.multipliers
    if not converged:
        logger.warning(
            "QP solver hit max_iter=%d; stationarity %.3g > tol %.3g.",
            max_iter,
            stationarity,
            tol,
        )
    logger.debug(
        "QP p=%d r=%d: %d iterations, stationarity %.3g.",
        p,
        problem.ineq_rows.shape[0],
        iteration,
        stationarity,
    )
    return QpSolution(
        v=x,
        objective=problem.objective(x),
        kkt_stationarity=stationarity,
        kkt_feasibility=problem.violation(x),
        iterations=iteration,
        converged=converged,
        multipliers=multipliers,
        objective_trace=tuple(trace),
    )


def _stationarity(
    x: np.ndarray, qx: np.ndarray, c: np.ndarray, lipschitz: float, project: _Projector
) -> float:
    """Infinity norm of the gradient mapping L (x - P(x - grad / L))."""
    mapped = project(x - (qx + c) / lipschitz)
    return float(np.max(np.abs(lipschitz * (x - mapped))))


def _polish(
    problem: QpProblem,
    q_matrix: np.ndarray,
    x: np.ndarray,
    fx: float,
    lipschitz: float,
    project: _Projector,
) -> t.Optional[t.Tuple[np.ndarray, np.ndarray, float, float]]:
    """Minimizer on the active face of ``x`` with its products, objective and residual.

    Returns None when the face system is singular or its solution is infeasible or
    worse than ``fx``.
    """
    c = problem.linear
    # sets the multipliers of the rows binding at x
    _stationarity(x, q_matrix @ x, c, lipschitz, project)
    margin = SOLVER_SETTINGS.active_set_margin
    free = (x - problem.lower > margin * (1.0 + np.abs(problem.lower))) & (
        problem.upper - x > margin * (1.0 + np.abs(problem.upper))
    )
    if not free.any():
        return None
    fixed = ~free
    binding = project.multipliers > 0
    rows = problem.ineq_rows[binding]
    n_free, n_rows = int(free.sum()), int(binding.sum())

    kkt = np.zeros((n_free + n_rows, n_free + n_rows))
    kkt[:n_free, :n_free] = q_matrix[np.ix_(free, free)]
    kkt[:n_free, n_free:] = rows[:, free].T
    kkt[n_free:, :n_free] = rows[:, free]
    rhs = np.concatenate(
        [
            -c[free] - q_matrix[np.ix_(free, fixed)] @ x[fixed],
            problem.ineq_bounds[binding] - rows[:, fixed] @ x[fixed],
        ]
    )
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LinAlgWarning)
            face = solve_linear(kkt, rhs, assume_a="sym")
    except (LinAlgError, ValueError):
        return None

    candidate = x.copy()
    candidate[free] = face[:n_free]
    if not np.all(np.isfinite(candidate)):
        return None
    candidate = np.clip(candidate, problem.lower, problem.upper)
    if problem.violation(candidate) > project.tol:
        return None
    q_candidate = q_matrix @ candidate
    f_candidate = float(0.5 * candidate @ q_candidate + c @ candidate)
    if f_candidate > fx:
        return None
    residual = _stationarity(candidate, q_candidate, c, lipschitz, project)
    logger.debug("Polished %d free coordinates, %d binding rows.", n_free, n_rows)
    return candidate, q_candidate, f_candidate, residual
