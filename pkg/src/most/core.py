"""Domain types shared across the package and plan-level functionals.

All arrays are float64. Value objects are frozen dataclasses whose array
fields are marked read-only after construction, so they can be shared
between threads freely.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np

HARD = math.inf
"""Penalty sentinel meaning "enforce this marginal exactly"."""

MARGINAL_TOL = 1e-12
DEFAULT_FEASIBILITY_TOL = 1e-7


class ShapeError(ValueError):
    """Array dimensions do not agree."""


def _frozen_array(values: Any, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Marginal:
    """A probability vector with a soft-constraint strength.

    ``penalty=HARD`` (the default) means the marginal is an equality
    constraint; a finite value means it is enforced through a KL penalty of
    that weight, and ``0`` leaves it free.
    """

    weights: np.ndarray
    penalty: float = HARD

    def __post_init__(self) -> None:
        w = _frozen_array(self.weights, 1, "weights")
        if w.size < 1:
            raise ValueError("marginal must have at least one entry")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("marginal weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > MARGINAL_TOL:
            raise ValueError(f"marginal weights sum to {w.sum()!r}, expected 1")
        if not (self.penalty >= 0):
            raise ValueError("penalty must be nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "penalty", float(self.penalty))

    def __len__(self) -> int:
        return self.weights.size

    @property
    def is_hard(self) -> bool:
        return math.isinf(self.penalty)

    def with_penalty(self, penalty: float) -> Marginal:
        return Marginal(self.weights, penalty)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Marginal):
            return NotImplemented
        return self.penalty == other.penalty and np.array_equal(self.weights, other.weights)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative n x m matching between objectives (rows) and solutions (columns).

    ``converged`` and ``iterations`` carry solver diagnostics; plans built by
    hand default to a converged state.
    """

    entries: np.ndarray
    converged: bool = True
    iterations: int = 0

    def __post_init__(self) -> None:
        e = _frozen_array(self.entries, 2, "entries")
        if not np.all(np.isfinite(e)):
            raise ValueError("plan entries must be finite")
        object.__setattr__(self, "entries", e)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def m(self) -> int:
        return self.entries.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape  # type: ignore[return-value]

    def mass(self) -> float:
        return float(self.entries.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TransportPlan):
            return NotImplemented
        return np.array_equal(self.entries, other.entries)

    __hash__ = None  # type: ignore[assignment]


class Problem:
    """A family of differentiable objectives over a shared parameter vector.

    Subclasses implement :meth:`eval`. :meth:`eval_all` may be overridden
    with a vectorized path; the default loops over objectives.
    """

    name: str = "problem"

    def __init__(self, n_objectives: int, param_dim: int, metadata: dict[str, Any] | None = None):
        if n_objectives < 1 or param_dim < 1:
            raise ValueError("problem needs at least one objective and one parameter")
        self.n_objectives = int(n_objectives)
        self.param_dim = int(param_dim)
        self.metadata: dict[str, Any] = dict(metadata or {})

    def eval(self, i: int, theta: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def eval_all(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(values, grads)`` with shapes ``(n,)`` and ``(n, param_dim)``."""
        values = np.empty(self.n_objectives)
        grads = np.empty((self.n_objectives, self.param_dim))
        for i in range(self.n_objectives):
            values[i], grads[i] = self.eval(i, theta)
        return values, grads

    def values(self, theta: np.ndarray) -> np.ndarray:
        return self.eval_all(theta)[0]

    def loss_matrix(self, thetas: np.ndarray) -> np.ndarray:
        """Losses ``L_i(theta_j)`` as an ``(n, m)`` matrix."""
        return np.column_stack([self.values(t) for t in thetas])

    def __repr__(self) -> str:
        return f"{type(self).__name__}(n={self.n_objectives}, dim={self.param_dim})"


class FunctionProblem(Problem):
    """Problem backed by a plain callable ``f(i, theta) -> (value, grad)``."""

    def __init__(self, fn, n_objectives: int, param_dim: int, name: str = "function", metadata=None):
        super().__init__(n_objectives, param_dim, metadata)
        self._fn = fn
        self.name = name

    def eval(self, i: int, theta: np.ndarray) -> tuple[float, np.ndarray]:
        value, grad = self._fn(i, np.asarray(theta, dtype=np.float64))
        return float(value), np.asarray(grad, dtype=np.float64)


@dataclass(frozen=True)
class SolutionSet:
    """m parameter vectors plus the step size and inner step count used on them."""

    params: np.ndarray
    step_size: float = 0.1
    inner_steps: int = 1

    def __post_init__(self) -> None:
        p = _frozen_array(self.params, 2, "params")
        if p.shape[0] < 1:
            raise ValueError("need at least one solution")
        if not np.all(np.isfinite(p)):
            raise ValueError("solution parameters must be finite")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        object.__setattr__(self, "params", p)

    @property
    def m(self) -> int:
        return self.params.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SolutionSet):
            return NotImplemented
        return (
            np.array_equal(self.params, other.params)
            and self.step_size == other.step_size
            and self.inner_steps == other.inner_steps
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class FeasibilityReport:
    row_deviation: float
    col_deviation: float
    min_entry: float
    tol: float = field(default=DEFAULT_FEASIBILITY_TOL)

    @property
    def feasible(self) -> bool:
        return (
            self.row_deviation <= self.tol
            and self.col_deviation <= self.tol
            and self.min_entry >= -self.tol
        )


def make_uniform_marginal(dim: int) -> Marginal:
    if dim < 1:
        raise ValueError(f"invalid marginal dimension {dim}")
    return Marginal(np.full(dim, 1.0 / dim), HARD)


def _entries(plan: TransportPlan | np.ndarray) -> np.ndarray:
    return plan.entries if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)


def validate_plan(
    plan: TransportPlan | np.ndarray,
    alpha: Marginal,
    beta: Marginal,
    tol: float = DEFAULT_FEASIBILITY_TOL,
) -> FeasibilityReport:
    """Check membership of ``plan`` in the transportation polytope of (alpha, beta)."""
    g = _entries(plan)
    if g.shape != (len(alpha), len(beta)):
        raise ShapeError(f"plan shape {g.shape} does not match marginals ({len(alpha)}, {len(beta)})")
    return FeasibilityReport(
        row_deviation=float(np.abs(g.sum(axis=1) - alpha.weights).max()),
        col_deviation=float(np.abs(g.sum(axis=0) - beta.weights).max()),
        min_entry=float(g.min()),
        tol=tol,
    )


def plan_regularizer(plan: TransportPlan | np.ndarray) -> float:
    """Negative sum of row maxima; lower means each objective commits to one solution."""
    return -float(_entries(plan).max(axis=1).sum())


def plan_diversity(plan: TransportPlan | np.ndarray) -> float:
    """Sum of pairwise column cosines over ordered pairs (lower is more diverse).

    Zero columns contribute nothing to any pair.
    """
    g = _entries(plan)
    m = g.shape[1]
    if m < 2:
        warnings.warn("plan_diversity needs at least two columns; returning 0", stacklevel=2)
        return 0.0
    norms = np.linalg.norm(g, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    unit = g / safe
    unit[:, norms == 0] = 0.0
    cos = unit.T @ unit
    return float(cos.sum() - np.trace(cos))
