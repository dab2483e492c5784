"""Outer loop: projected descent on hyperparameters with approximate gradients.

Each outer iteration k solves the inner problem and the Hessian linear
system only up to a tolerance eps_k from a summable schedule, assembles
the approximate hypergradient

    p_k = grad_lam g  -  (cross-derivative of h)^T q_k,
    where  (Hessian of h) q_k = grad_x g   (both at the inexact x_k),

and updates lam by a projected step.  The step size adapts by checking,
at the start of each iteration, whether the previous transition gained
enough; a violated check rolls the transition back and retakes it with a
shrunk step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BilevelProblem,
    BoxDomain,
    HoagState,
    NonFiniteError,
    ToleranceSchedule,
    TraceRecord,
    check_finite,
    project_box,
    tolerance_at,
)
from .solvers import CgReport, InnerSolveReport, NotConverged, cg_solve, inner_solve

__all__ = [
    "AdaptiveStepConfig",
    "HoagConfig",
    "GradientReports",
    "approx_hypergradient",
    "hoag_step",
    "hoag_run",
    "acceptance_rhs",
]

# stop after this many consecutive outer steps below STEP_ATOL
STEP_ATOL = 1e-10
TINY_STEPS_TO_STOP = 3


@dataclass(frozen=True)
class AdaptiveStepConfig:
    """Gain-test constants; defaults are the benchmark settings M=1, 0.5, 1.05."""

    M: float = 1.0
    alpha: float = 0.5
    beta: float = 1.05
    max_shrinks: int = 20

    def __post_init__(self):
        if self.M < 0:
            raise ValueError("M must be nonnegative")
        if not 0.0 < self.alpha < 1.0 < self.beta:
            raise ValueError("need 0 < alpha < 1 < beta")


@dataclass(frozen=True)
class HoagConfig:
    schedule: ToleranceSchedule = field(default_factory=ToleranceSchedule)
    domain: BoxDomain | None = None  # None: [-12, 12]^s once the problem is known
    max_outer_iters: int = 100
    step_config: AdaptiveStepConfig = field(default_factory=AdaptiveStepConfig)
    lambda0: np.ndarray | None = None  # None: the problem's per-coordinate default
    max_inner_iters: int = 100
    max_cg_iters: int = 100

    def resolved_domain(self, problem: BilevelProblem) -> BoxDomain:
        return self.domain if self.domain is not None else BoxDomain.symmetric(problem.n_hyper)

    def resolved_lambda0(self, problem: BilevelProblem) -> np.ndarray:
        lam0 = self.lambda0 if self.lambda0 is not None else problem.default_lambda0()
        lam0 = np.asarray(lam0, dtype=float)
        if not self.resolved_domain(problem).contains(lam0):
            raise ValueError("lambda0 lies outside the hyperparameter domain")
        return lam0


@dataclass
class GradientReports:
    inner: InnerSolveReport
    cg: CgReport
    warnings: list[str] = field(default_factory=list)


def approx_hypergradient(
    problem: BilevelProblem,
    lam,
    x_warm,
    q_warm,
    eps: float,
    max_inner_iters: int = 100,
    max_cg_iters: int = 100,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, GradientReports]:
    """Inexact hypergradient at lam, both solves run to tolerance eps.

    Returns (p, x, q, reports).  Solver budget exhaustion is downgraded
    to a warning on the reports (the best iterate is used); non-finite
    oracle output still raises.
    """
    warnings: list[str] = []
    try:
        inner = inner_solve(problem, lam, x_warm, eps, max_inner_iters)
    except NotConverged as exc:
        inner = exc.report
        warnings.append(f"inner solve hit {max_inner_iters} iterations: {exc}")
    x = inner.x

    rhs = check_finite(problem.outer_grad_params(x, lam), "outer_grad_params")

    def apply_hessian(v):
        return problem.hessian_vec(x, lam, v)

    try:
        cg = cg_solve(apply_hessian, rhs, q_warm, eps, max_cg_iters)
    except NotConverged as exc:
        cg = exc.report
        warnings.append(f"cg solve hit {max_cg_iters} iterations: {exc}")
    q = cg.q

    p = problem.outer_grad_hyper(x, lam) - problem.cross_vec(x, lam, q)
    check_finite(p, "hypergradient")
    return p, x, q, GradientReports(inner=inner, cg=cg, warnings=warnings)


def acceptance_rhs(
    prev_outer: float,
    lipschitz: float,
    M: float,
    eps_now: float,
    eps_prev: float,
    delta: float,
    step_size: float,
) -> float:
    """Right side of the step-acceptance inequality.

    The transition into the current iterate is accepted when

        g(lam_k, x_k) <= g(lam_{k-1}, x_{k-1}) + C eps_k
                         + eps_{k-1} (C + M) delta - delta^2 / (2 eta),

    with delta = ||lam_k - lam_{k-1}|| and eta the current step size.
    The 1/2 is the descent-lemma constant: for an exact gradient step
    the test then passes exactly when eta is at most the inverse local
    curvature, which is what lets the multiplicative eta adjustment
    servo onto a workable step size.  Without it the required gain
    exceeds what a smooth function can deliver (by the second-order
    Taylor term) and the step size collapses wherever the objective is
    locally convex.  With eps == 0 the test reduces to requiring a gain
    of delta^2 / (2 eta).
    """
    return (
        prev_outer
        + lipschitz * eps_now
        + eps_prev * (lipschitz + M) * delta
        - delta * delta / (2.0 * step_size)
    )


def _solve_inner_tracked(problem, lam, x_start, eps, max_iters, state):
    try:
        report = inner_solve(problem, lam, x_start, eps, max_iters)
    except NotConverged as exc:
        report = exc.report
        state.warnings.append(f"k={state.k}: inner solve not converged ({exc})")
    state.inner_iters += report.iterations
    return report


def hoag_step(problem: BilevelProblem, state: HoagState, config: HoagConfig,
              sink=None) -> HoagState:
    """One outer iteration; mutates and returns state.

    Order of play: solve the inner problem at the current lam_k; ratify
    the previous transition with the gain inequality (shrinking the step
    and retaking that transition on violation, at most max_shrinks
    times); then compute the hypergradient at the ratified lam_k and
    take the projected step to lam_{k+1}.  The very first iteration has
    no previous transition, so it is accepted as-is and the step size is
    normalized to make the first update at most length one.
    """
    k = state.k
    cfg = config.step_config
    domain = config.resolved_domain(problem)
    eps_k = tolerance_at(config.schedule, k)
    lipschitz = problem.outer_lipschitz()

    inner = _solve_inner_tracked(
        problem, state.lam, state.x, eps_k, config.max_inner_iters, state
    )
    x_k = inner.x
    g_k = float(problem.outer_loss(x_k, state.lam))
    check_finite(g_k, "outer_loss")

    if state.prev_lam is not None:
        shrinks = 0
        while True:
            delta = float(np.linalg.norm(state.lam - state.prev_lam))
            bound = acceptance_rhs(
                state.prev_outer, lipschitz, cfg.M, eps_k, state.prev_eps,
                delta, state.step_size,
            )
            if g_k <= bound:
                state.step_size *= cfg.beta
                break
            if shrinks >= cfg.max_shrinks:
                state.warnings.append(
                    f"k={k}: gain inequality still violated after "
                    f"{cfg.max_shrinks} step shrinks; keeping last candidate"
                )
                break
            state.step_size *= cfg.alpha
            state.lam = project_box(
                domain, state.prev_lam - state.step_size * state.prev_grad
            )
            inner = _solve_inner_tracked(
                problem, state.lam, x_k, eps_k, config.max_inner_iters, state
            )
            x_k = inner.x
            g_k = float(problem.outer_loss(x_k, state.lam))
            shrinks += 1

    rhs = check_finite(problem.outer_grad_params(x_k, state.lam), "outer_grad_params")

    def apply_hessian(v):
        return problem.hessian_vec(x_k, state.lam, v)

    try:
        cg = cg_solve(apply_hessian, rhs, state.q, eps_k, config.max_cg_iters)
    except NotConverged as exc:
        cg = exc.report
        state.warnings.append(f"k={k}: cg solve not converged ({exc})")
    state.cg_iters += cg.iterations

    p_k = problem.outer_grad_hyper(x_k, state.lam) - problem.cross_vec(
        x_k, state.lam, cg.q
    )
    check_finite(p_k, "hypergradient")
    p_norm = float(np.linalg.norm(p_k))

    if k == 1:
        if p_norm == 0.0:
            # already stationary at lambda_1
            state.converged = True
            _emit(state, k, state.lam, eps_k, g_k, p_norm, None, sink)
            state.x, state.q = x_k, cg.q
            state.k = k + 1
            return state
        state.step_size = 1.0 / p_norm

    lam_next = project_box(domain, state.lam - state.step_size * p_k)

    _emit(state, k, state.lam, eps_k, g_k, p_norm, state.step_size, sink)
    state.prev_lam = state.lam
    state.prev_outer = g_k
    state.prev_eps = eps_k
    state.prev_grad = p_k
    state.lam = lam_next
    state.x = x_k
    state.q = cg.q
    state.k = k + 1
    return state


def _emit(state, k, lam, eps, outer_value, grad_norm, step_size, sink):
    record = TraceRecord(
        k=k,
        lam=np.array(lam, copy=True),
        epsilon=eps,
        outer_value=outer_value,
        grad_norm=grad_norm,
        step_size=step_size,
        inner_iters=state.inner_iters,
        cg_iters=state.cg_iters,
        wall_time=time.perf_counter() - state.t_start,
    )
    state.trace.append(record)
    if sink is not None:
        sink(record)


def hoag_run(
    problem: BilevelProblem,
    config: HoagConfig,
    sink=None,
) -> tuple[HoagState, list[TraceRecord]]:
    """Run the driver from lambda_1 until the iteration budget or stagnation.

    Stops early after three consecutive outer steps of length <= 1e-10,
    or immediately when the first hypergradient is exactly zero.
    """
    lam0 = config.resolved_lambda0(problem)
    state = HoagState(
        lam=lam0,
        x=problem.initial_params(),
        q=np.zeros(problem.n_params),
        step_size=0.0,
    )
    state.t_start = time.perf_counter()

    tiny_steps = 0
    while state.k <= config.max_outer_iters:
        hoag_step(problem, state, config, sink=sink)
        if state.converged:
            break
        step_len = float(np.linalg.norm(state.lam - state.prev_lam))
        tiny_steps = tiny_steps + 1 if step_len <= STEP_ATOL else 0
        if tiny_steps >= TINY_STEPS_TO_STOP:
            state.converged = True
            break
    return state, state.trace
