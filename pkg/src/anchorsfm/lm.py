"""Dense Levenberg-Marquardt for small nonlinear least-squares problems.

The cost is ``0.5 * ||r(x)||^2``. Problems whose parameters live on a
manifold (camera rotations) provide ``plus(x, delta)``; Jacobians are then
taken with respect to the tangent increment ``delta`` at ``x``.
Jacobians may be dense arrays or scipy sparse matrices; the normal
equations are always formed and factored densely.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import InvalidInitialPoint, NumericalError, NumericalFailure, UnderConstrained

log = logging.getLogger(__name__)

MAX_DAMPING = 1e32


class Termination(str, enum.Enum):
    GRADIENT_TOLERANCE = "GradientTolerance"
    COST_TOLERANCE = "CostTolerance"
    MAX_ITERATIONS = "MaxIterations"
    STEP_TOLERANCE = "StepTolerance"


@dataclass
class LMOptions:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-8  # absolute at the start, then relative to the initial gradient
    cost_tolerance: float = 1e-12
    step_tolerance: float = 1e-12
    initial_damping: float = 1e-3
    # gain ratio this close to 1 means the linearization is exact locally
    exact_model_tolerance: float = 1e-6


@dataclass
class ResidualProblem:
    evaluate: Callable[[np.ndarray], np.ndarray]
    parameter_count: int
    residual_count: int
    jacobian: Optional[Callable[[np.ndarray], object]] = None
    plus: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def apply(self, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
        out = self.plus(x, delta) if self.plus is not None else x + delta
        if self.lower is not None or self.upper is not None:
            out = np.clip(out, self.lower, self.upper)
        return out


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: Termination
    step_costs: list = field(default_factory=list)


class LMResult(NamedTuple):
    x: np.ndarray
    report: SolveReport


def _safe_evaluate(problem: ResidualProblem, x: np.ndarray):
    """Residuals, or None if the point is infeasible (e.g. behind a camera)."""
    try:
        r = np.asarray(problem.evaluate(x), dtype=float)
    except NumericalError:
        return None
    if r.shape != (problem.residual_count,) or not np.all(np.isfinite(r)):
        return None
    return r


def _fd_step(problem: ResidualProblem, x: np.ndarray) -> np.ndarray:
    n = problem.parameter_count
    if x.shape == (n,):
        return np.maximum(1e-7, 1e-7 * np.abs(x))
    return np.full(n, 1e-7)


def numeric_jacobian(problem: ResidualProblem, x: np.ndarray) -> np.ndarray:
    """Central finite differences in the tangent space of ``x``."""
    n = problem.parameter_count
    J = np.empty((problem.residual_count, n))
    h = _fd_step(problem, x)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        rp = problem.evaluate(problem.apply(x, e))
        rm = problem.evaluate(problem.apply(x, -e))
        J[:, i] = (np.asarray(rp) - np.asarray(rm)) / (2 * h[i])
    return J


def check_jacobian(problem: ResidualProblem, x: np.ndarray, abs_tol=1e-5, rel_tol=1e-4):
    """Compare the analytic Jacobian with central differences at ``x``.

    Returns ``(ok, worst_excess)`` where ``worst_excess`` is the largest
    ``|analytic - numeric| - max(abs_tol, rel_tol * |numeric|)``.
    """
    Ja = problem.jacobian(x)
    if scipy.sparse.issparse(Ja):
        Ja = Ja.toarray()
    Jn = numeric_jacobian(problem, x)
    allowed = np.maximum(abs_tol, rel_tol * np.abs(Jn))
    excess = np.abs(np.asarray(Ja) - Jn) - allowed
    worst = float(excess.max()) if excess.size else -abs_tol
    return worst <= 0, worst


def lm_minimize(problem: ResidualProblem, initial, options: Optional[LMOptions] = None) -> LMResult:
    opts = options or LMOptions()
    if problem.residual_count < problem.parameter_count:
        raise UnderConstrained(f"{problem.residual_count} residuals cannot determine "
                               f"{problem.parameter_count} parameters")
    x = np.array(initial, dtype=float)
    r = _safe_evaluate(problem, x)
    if r is None:
        raise InvalidInitialPoint("residuals are not finite at the initial point")
    jac = problem.jacobian or (lambda p: numeric_jacobian(problem, p))
    cost = 0.5 * float(r @ r)
    report = SolveReport(cost, cost, 0, Termination.MAX_ITERATIONS, [])
    n = problem.parameter_count
    lam = None
    g0 = None

    while True:
        J = jac(x)
        if scipy.sparse.issparse(J):
            J = J.tocsr()
            g = J.T @ r
            A = (J.T @ J).toarray()
        else:
            J = np.asarray(J, dtype=float)
            g = J.T @ r
            A = J.T @ J
        if not np.all(np.isfinite(g)):
            raise NumericalFailure("non-finite gradient")
        gnorm = float(np.max(np.abs(g))) if n else 0.0
        if g0 is None:
            g0 = gnorm
            converged = gnorm < opts.gradient_tolerance
        else:
            # relative after the first step, so rescaling all residuals changes nothing
            converged = gnorm < opts.gradient_tolerance * g0
        if n == 0 or converged:
            report.termination = Termination.GRADIENT_TOLERANCE
            break
        if report.iterations >= opts.max_iterations:
            report.termination = Termination.MAX_ITERATIONS
            break
        report.iterations += 1
        if lam is None:
            mean_diag = float(np.mean(np.diag(A)))
            scale = mean_diag if mean_diag > 0 else 1.0
            lam = opts.initial_damping * scale
            lam_floor = 1e-15 * scale

        done = None
        while True:
            try:
                factor = scipy.linalg.cho_factor(A + lam * np.eye(n), check_finite=False)
                delta = -scipy.linalg.cho_solve(factor, g, check_finite=False)
            except (scipy.linalg.LinAlgError, ValueError):
                delta = None
            if delta is None or not np.all(np.isfinite(delta)):
                lam *= 10
                if lam > MAX_DAMPING:
                    raise NumericalFailure("normal equations unsolvable at maximum damping")
                continue
            if np.linalg.norm(delta) <= opts.step_tolerance * (np.linalg.norm(x) + opts.step_tolerance):
                done = Termination.STEP_TOLERANCE
                break
            x_new = problem.apply(x, delta)
            r_new = _safe_evaluate(problem, x_new)
            new_cost = 0.5 * float(r_new @ r_new) if r_new is not None else np.inf
            if new_cost < cost:
                predicted = -(g @ delta + 0.5 * delta @ (A @ delta))
                rho = (cost - new_cost) / predicted if predicted > 0 else 0.0
                rel_decrease = (cost - new_cost) / cost
                x, r, cost = x_new, r_new, new_cost
                report.step_costs.append(cost)
                lam /= 10
                if abs(1.0 - rho) < opts.exact_model_tolerance:
                    lam *= 1e-9
                lam = max(lam, lam_floor)
                if rel_decrease < opts.cost_tolerance:
                    done = Termination.COST_TOLERANCE
                break
            lam *= 10
            if lam > MAX_DAMPING:
                done = Termination.STEP_TOLERANCE
                break
        if done is not None:
            report.termination = done
            break

    report.final_cost = cost
    log.debug("lm: %s after %d iterations, cost %.3e -> %.3e", report.termination.value,
              report.iterations, report.initial_cost, cost)
    return LMResult(x, report)
