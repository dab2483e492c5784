"""Comparison methods: grid search, random search, unrolled differentiation.

All three emit the same trace schema as the main driver so their curves
overlay directly; work is counted in solver iterations (inner_iters) and
Hessian-product applications (cg_iters).
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BilevelProblem,
    BoxDomain,
    NonFiniteError,
    TraceRecord,
    check_finite,
    project_box,
)
from .driver import AdaptiveStepConfig, acceptance_rhs
from .solvers import NotConverged, inner_solve

__all__ = [
    "EvaluationBudget",
    "Diverged",
    "grid_search",
    "random_search",
    "iterdiff_gradient",
    "IterdiffConfig",
    "iterdiff_run",
]

EXACT_TOL = 1e-12
DIVERGENCE_PATIENCE = 10


class Diverged(RuntimeError):
    """The unrolled forward pass increased the inner loss too many times."""


@dataclass(frozen=True)
class EvaluationBudget:
    max_evaluations: int
    inner_cap: int = 100

    def __post_init__(self):
        if self.max_evaluations < 1 or self.inner_cap < 1:
            raise ValueError("budget values must be positive")


def _evaluate(problem, lam, inner_cap):
    """f(lam) via a floor-tolerance inner solve from a cold start."""
    try:
        report = inner_solve(
            problem, lam, problem.initial_params(), EXACT_TOL, inner_cap
        )
    except NotConverged as exc:
        report = exc.report
    return float(problem.outer_loss(report.x, lam)), report


class _TraceBuilder:
    def __init__(self, sink=None):
        self.records: list[TraceRecord] = []
        self.inner_iters = 0
        self.cg_iters = 0
        self.t_start = time.perf_counter()
        self.sink = sink

    def emit(self, k, lam, epsilon, outer_value, grad_norm=None, step_size=None):
        record = TraceRecord(
            k=k,
            lam=np.array(lam, copy=True),
            epsilon=epsilon,
            outer_value=outer_value,
            grad_norm=grad_norm,
            step_size=step_size,
            inner_iters=self.inner_iters,
            cg_iters=self.cg_iters,
            wall_time=time.perf_counter() - self.t_start,
        )
        self.records.append(record)
        if self.sink is not None:
            self.sink(record)


def grid_search(
    problem: BilevelProblem,
    domain: BoxDomain,
    points_per_dim: int = 10,
    budget: EvaluationBudget | None = None,
    sink=None,
):
    """Evaluate f on an equally spaced grid; argmin with lexicographic ties.

    The grid is walked in lexicographic coordinate order and only strict
    improvements replace the incumbent, so ties go to the lowest point.
    """
    if points_per_dim < 2:
        raise ValueError("points_per_dim must be at least 2")
    budget = budget or EvaluationBudget(max_evaluations=points_per_dim**domain.dim)
    axes = [
        np.linspace(domain.lower[i], domain.upper[i], points_per_dim)
        for i in range(domain.dim)
    ]
    trace = _TraceBuilder(sink)
    best_lam, best_val = None, np.inf
    for k, point in enumerate(itertools.product(*axes), start=1):
        if k > budget.max_evaluations:
            break
        lam = np.array(point)
        value, report = _evaluate(problem, lam, budget.inner_cap)
        trace.inner_iters += report.iterations
        trace.emit(k, lam, EXACT_TOL, value)
        if value < best_val:
            best_lam, best_val = lam, value
    return best_lam, trace.records


def random_search(
    problem: BilevelProblem,
    domain: BoxDomain,
    budget: EvaluationBudget,
    seed: int,
    sink=None,
):
    """Uniform samples from the box, seeded; argmin over the samples."""
    rng = np.random.default_rng(seed)
    trace = _TraceBuilder(sink)
    best_lam, best_val = None, np.inf
    for k in range(1, budget.max_evaluations + 1):
        lam = rng.uniform(domain.lower, domain.upper)
        value, report = _evaluate(problem, lam, budget.inner_cap)
        trace.inner_iters += report.iterations
        trace.emit(k, lam, EXACT_TOL, value)
        if value < best_val:
            best_lam, best_val = lam, value
    return best_lam, trace.records


def _unroll(problem, lam, x0, n_steps, eta_inner):
    """Forward gradient descent storing iterates; aborts on sustained increase."""
    x = np.array(x0, dtype=float)
    iterates = [x]
    loss = problem.inner_loss(x, lam)
    increases = 0
    for _ in range(n_steps):
        grad = check_finite(problem.inner_grad(x, lam), "inner_grad")
        x = x - eta_inner * grad
        new_loss = problem.inner_loss(x, lam)
        if not np.isfinite(new_loss):
            raise NonFiniteError("inner loss diverged during unrolling")
        increases = increases + 1 if new_loss > loss else 0
        if increases >= DIVERGENCE_PATIENCE:
            raise Diverged(
                f"inner loss rose {DIVERGENCE_PATIENCE} consecutive steps"
            )
        loss = new_loss
        iterates.append(x)
    return iterates


def _reverse(problem, lam, iterates, eta_inner):
    """Backpropagate through the stored forward pass; returns the lam gradient."""
    x_final = iterates[-1]
    dlam = np.array(problem.outer_grad_hyper(x_final, lam), dtype=float)
    xbar = np.array(problem.outer_grad_params(x_final, lam), dtype=float)
    for x_t in reversed(iterates[:-1]):
        dlam -= eta_inner * problem.cross_vec(x_t, lam, xbar)
        xbar -= eta_inner * problem.hessian_vec(x_t, lam, xbar)
    return check_finite(dlam, "iterdiff gradient")


def _power_iteration_bound(problem, lam, x0, rounds: int = 20) -> float:
    """Largest-eigenvalue estimate of the inner Hessian at x0."""
    v = np.ones(problem.n_params) / np.sqrt(problem.n_params)
    estimate = problem.strong_convexity(lam)
    for _ in range(rounds):
        hv = problem.hessian_vec(x0, lam, v)
        norm = float(np.linalg.norm(hv))
        if norm == 0.0:
            break
        estimate = norm
        v = hv / norm
    return max(estimate, problem.strong_convexity(lam))


def default_inner_step(problem, lam, x0) -> float:
    """2 / (mu + L) with L estimated by power iteration; the classic GD step."""
    mu = problem.strong_convexity(lam)
    lipschitz = _power_iteration_bound(problem, lam, x0)
    return 2.0 / (mu + lipschitz)


def iterdiff_gradient(
    problem: BilevelProblem,
    lam,
    x0,
    n_steps: int,
    eta_inner: float,
) -> np.ndarray:
    """Hypergradient by differentiating through n_steps of gradient descent."""
    if n_steps < 1:
        raise ValueError("need at least one forward step")
    lam = np.asarray(lam, dtype=float)
    iterates = _unroll(problem, lam, x0, n_steps, eta_inner)
    return _reverse(problem, lam, iterates, eta_inner)


@dataclass(frozen=True)
class IterdiffConfig:
    domain: BoxDomain | None = None
    max_outer_iters: int = 100
    step_config: AdaptiveStepConfig = field(default_factory=AdaptiveStepConfig)
    lambda0: np.ndarray | None = None
    unroll_steps: int = 100


def iterdiff_run(problem: BilevelProblem, config: IterdiffConfig, sink=None):
    """Projected descent like the main driver, but with unrolled gradients.

    The acceptance inequality runs with a zero tolerance parameter, and
    every gradient recomputes the full forward pass from a cold start
    (unrolling cannot reuse the previous solution as a warm start).
    """
    domain = config.domain if config.domain is not None else BoxDomain.symmetric(
        problem.n_hyper
    )
    lam = np.asarray(
        config.lambda0 if config.lambda0 is not None else problem.default_lambda0(),
        dtype=float,
    )
    if not domain.contains(lam):
        raise ValueError("lambda0 lies outside the hyperparameter domain")
    cfg = config.step_config
    trace = _TraceBuilder(sink)
    x0 = problem.initial_params()

    def forward(lam_val):
        eta_inner = default_inner_step(problem, lam_val, x0)
        iterates = _unroll(problem, lam_val, x0, config.unroll_steps, eta_inner)
        trace.inner_iters += config.unroll_steps
        value = float(problem.outer_loss(iterates[-1], lam_val))
        return iterates, eta_inner, value

    step_size = 0.0
    prev_lam = prev_val = prev_grad = None
    tiny_steps = 0
    k = 1
    while k <= config.max_outer_iters:
        iterates, eta_inner, g_k = forward(lam)

        if prev_lam is not None:
            shrinks = 0
            while True:
                delta = float(np.linalg.norm(lam - prev_lam))
                bound = acceptance_rhs(
                    prev_val, problem.outer_lipschitz(), cfg.M, 0.0, 0.0,
                    delta, step_size,
                )
                if g_k <= bound:
                    step_size *= cfg.beta
                    break
                if shrinks >= cfg.max_shrinks:
                    break
                step_size *= cfg.alpha
                lam = project_box(domain, prev_lam - step_size * prev_grad)
                iterates, eta_inner, g_k = forward(lam)
                shrinks += 1

        p_k = _reverse(problem, lam, iterates, eta_inner)
        trace.cg_iters += config.unroll_steps
        p_norm = float(np.linalg.norm(p_k))

        if k == 1:
            if p_norm == 0.0:
                trace.emit(k, lam, 0.0, g_k, p_norm, None)
                break
            step_size = 1.0 / p_norm

        lam_next = project_box(domain, lam - step_size * p_k)
        trace.emit(k, lam, 0.0, g_k, p_norm, step_size)
        prev_lam, prev_val, prev_grad = lam, g_k, p_k
        lam = lam_next
        k += 1

        step_len = float(np.linalg.norm(lam - prev_lam))
        tiny_steps = tiny_steps + 1 if step_len <= 1e-10 else 0
        if tiny_steps >= 3:
            break

    return lam, trace.records
