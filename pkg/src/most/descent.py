"""Plan-weighted multiple-gradient descent.

For a solution ``theta_j`` and the plan column ``gamma[:, j]``, the step is
the negated min-norm point of the convex hull of the weighted gradients
``gamma[i, j] * grad L_i(theta_j)``. The min-norm weights come from a
Frank-Wolfe solver over the simplex with away steps and exact line search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Problem


POLISH_EVERY = 25


class EmptySupportError(ValueError):
    pass


@dataclass(frozen=True)
class MinNormConfig:
    max_iters: int = 500
    gap_tol: float = 1e-8
    support_eps: float = 1e-12

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.gap_tol > 0:
            raise ValueError("gap_tol must be > 0")
        if not self.support_eps >= 0:
            raise ValueError("support_eps must be >= 0")


@dataclass(frozen=True)
class MinNormResult:
    weights: np.ndarray
    value: float
    gap: float
    iterations: int


@dataclass(frozen=True)
class DescentResult:
    """Direction ``d`` with the dual weights that produced it.

    ``support`` indexes the objectives that entered the min-norm problem and
    ``dual_weights`` is aligned with it. ``gap`` is the Frank-Wolfe duality
    gap, which bounds how far the descent inequality can be violated;
    ``contract_residual`` is the worst observed value of
    ``gamma_i * g_i . d + |d|^2 / 2`` over the support.
    """

    direction: np.ndarray
    dual_weights: np.ndarray
    support: np.ndarray
    sq_norm: float
    gap: float = 0.0
    contract_residual: float = 0.0
    empty_support: bool = False
    losses: np.ndarray | None = field(default=None, repr=False)


def min_norm_weights(gradients, cfg: MinNormConfig | None = None) -> MinNormResult:
    """Minimize ``|sum_i w_i g_i|^2`` over the simplex.

    Starts from uniform weights. Each iteration takes either a toward step
    to the best vertex or an away step from the worst active vertex,
    whichever has the larger gap, with the exact minimizing step length.
    Stops once the Frank-Wolfe gap ``v.v - min_i g_i.v`` is below
    ``cfg.gap_tol``.
    """
    cfg = cfg or MinNormConfig()
    g = np.asarray(gradients, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :] if g.size else g.reshape(0, 0)
    if g.shape[0] == 0:
        raise EmptySupportError("min-norm problem needs at least one vector")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient in min-norm problem")
    k = g.shape[0]
    gram = g @ g.T
    lam = np.full(k, 1.0 / k)
    if k == 1:
        return MinNormResult(lam, float(gram[0, 0]), 0.0, 0)

    it = 0
    gap = np.inf
    for it in range(1, cfg.max_iters + 1):
        mv = gram @ lam  # g_i . v
        vv = float(lam @ mv)
        s = int(np.argmin(mv))
        gap = vv - float(mv[s])
        if gap <= cfg.gap_tol:
            break
        active = np.flatnonzero(lam > 0)
        a = int(active[np.argmax(mv[active])])
        away_gap = float(mv[a]) - vv
        if gap >= away_gap:
            direction = -lam.copy()
            direction[s] += 1.0
            step_max = 1.0
        else:
            direction = lam.copy()
            direction[a] -= 1.0
            step_max = lam[a] / (1.0 - lam[a]) if lam[a] < 1.0 else np.inf
        curv = float(direction @ gram @ direction)
        slope = float(direction @ mv)
        if curv <= 0:
            step = step_max
        else:
            step = min(max(-slope / curv, 0.0), step_max)
        if step == 0.0:
            break
        lam = lam + step * direction
        np.maximum(lam, 0.0, out=lam)
        lam /= lam.sum()
        if it % POLISH_EVERY == 0:
            lam = _polish(gram, lam)
    if gap > cfg.gap_tol:
        lam = _polish(gram, lam)
    mv = gram @ lam
    vv = float(lam @ mv)
    gap = max(vv - float(mv.min()), 0.0)
    return MinNormResult(lam, vv, gap, it)


def _polish(gram: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Fully corrective step on the active face (a Wolfe minor cycle).

    Move toward the minimizer over the affine hull of the active vertices,
    dropping the first vertex whose weight would turn negative, until that
    minimizer is feasible. Toward and away steps alone crawl when the
    optimum sits inside a face.
    """
    lam = lam.copy()
    for _ in range(lam.size):
        active = np.flatnonzero(lam > 0)
        k = active.size
        if k < 2:
            return lam
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = gram[np.ix_(active, active)]
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.zeros(k + 1)
        rhs[k] = 1.0
        y = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
        if not np.isfinite(y).all():
            return lam
        y /= y.sum()
        cur = lam[active]
        if y.min() >= 0:
            cand = np.zeros_like(lam)
            cand[active] = y
            return cand if cand @ gram @ cand <= lam @ gram @ lam else lam
        neg = np.flatnonzero(y < 0)
        ratios = cur[neg] / (cur[neg] - y[neg])
        hit = int(np.argmin(ratios))
        nxt = cur + ratios[hit] * (y - cur)
        nxt[neg[hit]] = 0.0
        nxt = np.maximum(nxt, 0.0)
        cand = np.zeros_like(lam)
        cand[active] = nxt / nxt.sum()
        if cand @ gram @ cand > lam @ gram @ lam:
            return lam
        lam = cand
    return lam


def direction_from_gradients(
    grads: np.ndarray,
    gamma_col: np.ndarray,
    cfg: MinNormConfig | None = None,
    losses: np.ndarray | None = None,
) -> DescentResult:
    """Descent direction given per-objective gradients ``(n, p)`` and a plan column."""
    cfg = cfg or MinNormConfig()
    gamma_col = np.asarray(gamma_col, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if np.any(gamma_col < 0):
        raise ValueError("plan column must be nonnegative")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")
    support = np.flatnonzero(gamma_col > cfg.support_eps)
    if support.size == 0:
        return DescentResult(
            direction=np.zeros(grads.shape[1]),
            dual_weights=np.zeros(0),
            support=support,
            sq_norm=0.0,
            empty_support=True,
            losses=losses,
        )
    weighted = gamma_col[support, None] * grads[support]
    mn = min_norm_weights(weighted, cfg)
    d = -(mn.weights @ weighted)
    sq = float(d @ d)
    residual = float((weighted @ d).max() + 0.5 * sq)
    return DescentResult(
        direction=d,
        dual_weights=mn.weights,
        support=support,
        sq_norm=sq,
        gap=mn.gap,
        contract_residual=residual,
        losses=losses,
    )


def descent_direction(
    problem: Problem, theta: np.ndarray, gamma_col: np.ndarray, cfg: MinNormConfig | None = None
) -> DescentResult:
    """``d = -sum_i w_i gamma_i grad L_i(theta)`` over the supported objectives."""
    values, grads = problem.eval_all(np.asarray(theta, dtype=np.float64))
    return direction_from_gradients(grads, gamma_col, cfg, losses=values)


def inner_descent(
    problem: Problem,
    theta: np.ndarray,
    gamma_col: np.ndarray,
    eta: float,
    K: int,
    cfg: MinNormConfig | None = None,
    trace: list[DescentResult] | None = None,
) -> tuple[np.ndarray, DescentResult]:
    """Apply ``K`` steps ``theta <- theta + eta * d`` with the plan column held fixed.

    Every intermediate result is appended to ``trace`` when given.
    """
    if not eta > 0:
        raise ValueError("step size must be > 0")
    if K < 1:
        raise ValueError("K must be >= 1")
    theta = np.array(theta, dtype=np.float64, copy=True)
    last: DescentResult | None = None
    for _ in range(K):
        last = descent_direction(problem, theta, gamma_col, cfg)
        if trace is not None:
            trace.append(last)
        theta = theta + eta * last.direction
    assert last is not None
    return theta, last
