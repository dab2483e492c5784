"""Inexact solvers: limited-memory quasi-Newton descent and linear CG.

Both solvers stop on absolute criteria chosen so that a converged report
certifies a distance bound.  The inner solver enforces
mu^-1 * ||grad h(x)|| <= eps, which for a mu-strongly convex h bounds
||x - argmin h|| by eps; the CG solver enforces ||A q - b|| <= eps on the
true (recomputed) residual.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import BilevelProblem, NonFiniteError

__all__ = [
    "InnerSolveReport",
    "CgReport",
    "NotConverged",
    "inner_solve",
    "cg_solve",
]

LBFGS_MEMORY = 10
ARMIJO_C1 = 1e-4
BACKTRACK_FACTOR = 0.5
MAX_BACKTRACKS = 50
STALL_PATIENCE = 50  # iterations without a new best gradient norm


@dataclass
class InnerSolveReport:
    x: np.ndarray
    grad_norm: float
    iterations: int
    achieved_bound: float  # mu^-1 * grad_norm
    converged: bool


@dataclass
class CgReport:
    q: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool


class NotConverged(RuntimeError):
    """Iteration budget exhausted before the tolerance was met.

    Carries the best-effort report; callers are free to proceed with it.
    """

    def __init__(self, report):
        super().__init__(
            f"not converged after {report.iterations} iterations "
            f"(achieved {getattr(report, 'achieved_bound', getattr(report, 'residual_norm', None)):.3e})"
        )
        self.report = report


def _finite(value, what):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{what} returned a non-finite value")
    return value


def cg_solve(apply_A, b, q0, eps: float, max_iters: int) -> CgReport:
    """Conjugate gradients on A q = b with a symmetric PD operator.

    Matrix-free: A enters only through apply_A.  Warm-started from q0.
    Terminates when the true residual ||A q - b|| (recomputed, not the
    recursive one) drops to eps; the recursive residual only gates when
    that recomputation happens.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    b = np.asarray(b, dtype=float)
    q = np.array(q0, dtype=float, copy=True)

    r = b - _finite(apply_A(q), "operator") if np.any(q) else b.copy()
    res_norm = float(np.linalg.norm(r))
    if res_norm <= eps:
        return CgReport(q=q, residual_norm=res_norm, iterations=0, converged=True)

    p = r.copy()
    rs = float(r @ r)
    iterations = 0
    while iterations < max_iters:
        Ap = _finite(apply_A(p), "operator")
        curvature = float(p @ Ap)
        if curvature <= 0:
            # operator not PD along p; bail out with the current iterate
            break
        alpha = rs / curvature
        q += alpha * p
        r -= alpha * Ap
        iterations += 1
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= eps:
            # confirm with a fresh residual; recursive r drifts
            r = b - _finite(apply_A(q), "operator")
            rs_new = float(r @ r)
            res_norm = float(np.sqrt(rs_new))
            if res_norm <= eps:
                return CgReport(
                    q=q, residual_norm=res_norm, iterations=iterations, converged=True
                )
            p = r.copy()
            rs = rs_new
            continue
        p = r + (rs_new / rs) * p
        rs = rs_new

    r = b - _finite(apply_A(q), "operator")
    res_norm = float(np.linalg.norm(r))
    report = CgReport(
        q=q,
        residual_norm=res_norm,
        iterations=iterations,
        converged=res_norm <= eps,
    )
    if not report.converged:
        raise NotConverged(report)
    return report


def _lbfgs_direction(grad, s_hist, y_hist):
    """Two-loop recursion; falls back to steepest descent with no history."""
    d = -grad
    if not s_hist:
        gnorm = np.linalg.norm(grad)
        return d / gnorm if gnorm > 0 else d
    alphas = []
    for s, y, rho in reversed(list(zip(s_hist, y_hist, _rhos(s_hist, y_hist)))):
        a = rho * float(s @ d)
        alphas.append((a, y))
        d = d - a * y
    s, y = s_hist[-1], y_hist[-1]
    d = d * (float(s @ y) / float(y @ y))
    for (a, y), s, rho in zip(
        reversed(alphas), s_hist, _rhos(s_hist, y_hist)
    ):
        beta = rho * float(y @ d)
        d = d + (a - beta) * s
    return d


def _rhos(s_hist, y_hist):
    return [1.0 / float(s @ y) for s, y in zip(s_hist, y_hist)]


def inner_solve(
    problem: BilevelProblem,
    lam,
    x0,
    eps: float,
    max_iters: int = 100,
) -> InnerSolveReport:
    """Minimize h(., lam) until mu^-1 ||grad h|| <= eps, warm-started at x0.

    General problems run limited-memory quasi-Newton descent (history 10)
    with Armijo backtracking; problems declaring a quadratic inner
    objective are routed to a single linear CG solve instead.

    Raises NotConverged (carrying the best iterate's report) when the
    budget runs out, and NonFiniteError when the oracles blow up.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = problem.strong_convexity(lam)
    if mu <= 0:
        raise ValueError("inner solve needs a positive strong-convexity constant")

    if problem.quadratic_inner:
        return _inner_solve_quadratic(problem, lam, x0, eps, mu, max_iters)

    x = np.array(x0, dtype=float, copy=True)
    f = _finite(problem.inner_loss(x, lam), "inner_loss")
    grad = _finite(problem.inner_grad(x, lam), "inner_grad")
    grad_norm = float(np.linalg.norm(grad))
    best_x, best_grad_norm = x, grad_norm

    s_hist: deque = deque(maxlen=LBFGS_MEMORY)
    y_hist: deque = deque(maxlen=LBFGS_MEMORY)

    iterations = 0
    stalled = 0
    while grad_norm / mu > eps and iterations < max_iters:
        d = _lbfgs_direction(grad, s_hist, y_hist)
        slope = float(grad @ d)
        if slope >= 0:
            # stale curvature pairs; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -grad / grad_norm
            slope = float(grad @ d)

        step = 1.0
        f_new = None
        x_new = None
        for _ in range(MAX_BACKTRACKS):
            x_try = x + step * d
            f_try = _finite(problem.inner_loss(x_try, lam), "inner_loss")
            if f_try <= f + ARMIJO_C1 * step * slope:
                f_new, x_new = f_try, x_try
                break
            step *= BACKTRACK_FACTOR
        if x_new is None:
            break  # line search exhausted; the floor of float resolution

        grad_new = _finite(problem.inner_grad(x_new, lam), "inner_grad")
        s = x_new - x
        y = grad_new - grad
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
        x, f, grad = x_new, f_new, grad_new
        grad_norm = float(np.linalg.norm(grad))
        iterations += 1
        if grad_norm < best_grad_norm:
            best_x, best_grad_norm = x, grad_norm
            stalled = 0
        else:
            stalled += 1
            if stalled >= STALL_PATIENCE:
                break  # grinding at float resolution; keep the best iterate

    bound = best_grad_norm / mu
    report = InnerSolveReport(
        x=best_x,
        grad_norm=best_grad_norm,
        iterations=iterations,
        achieved_bound=bound,
        converged=bound <= eps,
    )
    if not report.converged:
        raise NotConverged(report)
    return report


def _inner_solve_quadratic(problem, lam, x0, eps, mu, max_iters):
    """Quadratic h: grad h(x0 + d) = H d + grad h(x0), so solve H d = -grad."""
    x0 = np.asarray(x0, dtype=float)
    grad0 = _finite(problem.inner_grad(x0, lam), "inner_grad")

    def apply_H(v):
        return problem.hessian_vec(x0, lam, v)

    try:
        cg = cg_solve(apply_H, -grad0, np.zeros_like(grad0), eps * mu, max_iters)
    except NotConverged as exc:
        cg = exc.report
    x = x0 + cg.q
    bound = cg.residual_norm / mu
    report = InnerSolveReport(
        x=x,
        grad_norm=cg.residual_norm,
        iterations=cg.iterations,
        achieved_bound=bound,
        converged=bound <= eps,
    )
    if not report.converged:
        raise NotConverged(report)
    return report
