"""Domain types shared by the whole toolkit.

Hyperparameters and model parameters are plain float64 numpy vectors
(length ``s`` and ``p`` respectively); the types below carry everything
else: the box the hyperparameters live in, the tolerance sequence that
controls inexact solves, the oracle interface a bilevel problem has to
implement, and the per-iteration trace record every method emits.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NonFiniteError",
    "BoxDomain",
    "ToleranceSchedule",
    "tolerance_at",
    "project_box",
    "BilevelProblem",
    "TraceRecord",
    "HoagState",
]

SCHEDULE_KINDS = ("quadratic", "cubic", "exponential", "exact")


class NonFiniteError(FloatingPointError):
    """An oracle or solver produced a NaN or infinity."""


def _as_vector(values, name="values"):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box; the feasible set for hyperparameters.

    Defaults to the interval [-12, 12] per coordinate, the domain used
    for every benchmark problem shipped here.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __init__(self, lower, upper):
        lower = _as_vector(lower, "lower")
        upper = _as_vector(upper, "upper")
        if lower.shape != upper.shape:
            raise ValueError("lower and upper must have the same length")
        if np.any(lower > upper):
            raise ValueError("lower[i] <= upper[i] must hold for all i")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def symmetric(cls, dim: int, half_width: float = 12.0) -> "BoxDomain":
        return cls(np.full(dim, -half_width), np.full(dim, half_width))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, point, atol: float = 0.0) -> bool:
        point = np.asarray(point, dtype=float)
        return bool(
            np.all(point >= self.lower - atol) and np.all(point <= self.upper + atol)
        )


def project_box(domain: BoxDomain, point) -> np.ndarray:
    """Euclidean projection onto the box: per-coordinate clamping."""
    point = np.asarray(point, dtype=float)
    if point.shape != domain.lower.shape:
        raise ValueError(
            f"point has length {point.shape}, domain has length {domain.lower.shape}"
        )
    return np.clip(point, domain.lower, domain.upper)


@dataclass(frozen=True)
class ToleranceSchedule:
    """Sequence of solve tolerances for the outer iterations.

    ``quadratic`` gives c/k^2, ``cubic`` c/k^3, ``exponential``
    c * ratio^(k-1+exp_offset), and ``exact`` emits the floor at every
    iteration.  All decreasing kinds are summable; the floor caps the
    maximum precision ever requested from the inner solvers.

    ``exp_offset`` shifts the exponential's index: 0 (default) makes the
    first tolerance exactly c, 1 makes it c * ratio.
    """

    kind: str = "exponential"
    c: float = 0.1
    ratio: float = 0.9
    floor: float = 1e-12
    exp_offset: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.c <= 0:
            raise ValueError("c must be positive")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must be in (0, 1)")
        if self.floor <= 0:
            raise ValueError("floor must be positive")


def tolerance_at(schedule: ToleranceSchedule, k: int) -> float:
    """Tolerance for outer iteration k (1-based), floored at schedule.floor."""
    if k < 1:
        raise ValueError("iteration index k must be >= 1")
    if schedule.kind == "quadratic":
        raw = schedule.c / k**2
    elif schedule.kind == "cubic":
        raw = schedule.c / k**3
    elif schedule.kind == "exponential":
        raw = schedule.c * schedule.ratio ** (k - 1 + schedule.exp_offset)
    else:  # exact
        raw = schedule.floor
    return max(schedule.floor, raw)


class BilevelProblem(ABC):
    """Oracle interface a bilevel problem must provide.

    The inner objective h(x, lam) defines the model parameters
    X(lam) = argmin_x h(x, lam); the outer objective g(x, lam) is the
    quantity being minimized over the hyperparameters.  All derivatives
    are hand-coded; the Hessian of h is only ever touched through
    matrix-vector products so it never has to be materialized.
    """

    #: inner-problem dimension p
    n_params: int
    #: hyperparameter dimension s
    n_hyper: int
    #: True when h is quadratic in x, letting the inner solve run as a
    #: single linear conjugate-gradient system.
    quadratic_inner: bool = False

    @abstractmethod
    def inner_loss(self, x, lam) -> float: ...

    @abstractmethod
    def inner_grad(self, x, lam) -> np.ndarray:
        """Gradient of h with respect to x; length p."""

    @abstractmethod
    def hessian_vec(self, x, lam, v) -> np.ndarray:
        """Product of the inner Hessian (w.r.t. x) with v; length p."""

    @abstractmethod
    def cross_vec(self, x, lam, v) -> np.ndarray:
        """Product of the transposed cross-derivative of h with v; length s."""

    @abstractmethod
    def outer_loss(self, x, lam) -> float: ...

    @abstractmethod
    def outer_grad_params(self, x, lam) -> np.ndarray:
        """Gradient of g with respect to x; length p."""

    @abstractmethod
    def outer_grad_hyper(self, x, lam) -> np.ndarray:
        """Gradient of g with respect to lam; length s."""

    @abstractmethod
    def strong_convexity(self, lam) -> float:
        """Lower bound on the smallest eigenvalue of the inner Hessian."""

    @abstractmethod
    def outer_lipschitz(self) -> float:
        """Data-derived Lipschitz constant of g in x (may be loose)."""

    def initial_params(self) -> np.ndarray:
        return np.zeros(self.n_params)

    def default_lambda0(self) -> np.ndarray:
        """Per-coordinate initialization; regularization coordinates start at 0."""
        return np.zeros(self.n_hyper)

    def validation_loss(self, x, lam=None) -> float | None:
        """Outer loss on the held-back third split, if the problem carries one."""
        return None


@dataclass
class TraceRecord:
    """One row of a run trace; counters and wall_time are cumulative."""

    k: int
    lam: np.ndarray
    epsilon: float
    outer_value: float
    grad_norm: float | None
    step_size: float | None
    inner_iters: int
    cg_iters: int
    wall_time: float

    def as_dict(self) -> dict:
        """JSON-ready mapping with the wire-format key names."""
        return {
            "k": self.k,
            "lambda": [float(v) for v in np.atleast_1d(self.lam)],
            "epsilon": float(self.epsilon),
            "outer_value": float(self.outer_value),
            "grad_norm": None if self.grad_norm is None else float(self.grad_norm),
            "step_size": None if self.step_size is None else float(self.step_size),
            "inner_iters": int(self.inner_iters),
            "cg_iters": int(self.cg_iters),
            "wall_time": float(self.wall_time),
        }


@dataclass
class HoagState:
    """Mutable per-run state owned by a single driver loop."""

    lam: np.ndarray
    x: np.ndarray
    q: np.ndarray
    step_size: float
    k: int = 1
    trace: list[TraceRecord] = field(default_factory=list)
    inner_iters: int = 0
    cg_iters: int = 0
    warnings: list[str] = field(default_factory=list)
    # previous accepted iterate, needed by the step-size acceptance test
    prev_lam: np.ndarray | None = None
    prev_outer: float | None = None
    prev_eps: float | None = None
    prev_grad: np.ndarray | None = None
    converged: bool = False
    t_start: float = 0.0


def check_finite(arr, what: str):
    """Raise NonFiniteError when arr has NaN/inf entries; return arr."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} is not finite")
    return arr


def schedule_partial_sum(schedule: ToleranceSchedule, n_terms: int) -> float:
    """Partial sum of the un-floored sequence; diagnostic for summability."""
    k = np.arange(1, n_terms + 1, dtype=float)
    if schedule.kind == "quadratic":
        terms = schedule.c / k**2
    elif schedule.kind == "cubic":
        terms = schedule.c / k**3
    elif schedule.kind == "exponential":
        terms = schedule.c * schedule.ratio ** (k - 1 + schedule.exp_offset)
    else:
        terms = np.full_like(k, schedule.floor)
    return float(terms.sum())


def projected_gradient_norm(domain: BoxDomain, lam, grad) -> float:
    """Stationarity measure ||lam - P(lam - grad)||; zero at a stationary point."""
    lam = np.asarray(lam, dtype=float)
    return float(np.linalg.norm(lam - project_box(domain, lam - grad)))
