"""Optimal transport between objectives and solutions.

The solver is an inexact proximal-point scheme: every outer step solves an
entropic OT problem whose reference measure is the previous plan, using a
few log-domain Sinkhorn scalings. Its fixed point is the exact
(unregularized) optimum, so plans sharpen toward a vertex of the
transportation polytope as iterations accumulate.

Soft marginals replace the equality constraint by a generalized KL penalty,
which turns each scaling step into the usual unbalanced power update.
"""

from __future__ import annotations

import itertools
import math
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import HARD, Marginal, ShapeError, TransportPlan, plan_regularizer

ZERO_TOL = 1e-8
DUST = 1e-10
DRAIN_RATE = 1e-3


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class OtConfig:
    """Knobs for the proximal-point solver.

    ``proximal_weight`` is measured against the cost matrix rescaled to unit
    range, so the same value behaves alike for any loss scale.
    """

    proximal_weight: float = 0.01
    inner_iters: int = 5
    outer_iters: int = 200
    stop_tol: float = 1e-7
    regularizer_max_rounds: int = 20

    def __post_init__(self) -> None:
        if not self.proximal_weight > 0:
            raise ValueError("proximal_weight must be > 0")
        if self.inner_iters < 1 or self.outer_iters < 1 or self.regularizer_max_rounds < 1:
            raise ValueError("iteration counts must be >= 1")
        if not self.stop_tol > 0:
            raise ValueError("stop_tol must be > 0")


@dataclass(frozen=True)
class CurriculumSchedule:
    """Linear hand-over from enforcing the solution marginal to the objective marginal."""

    total_iters: int = 1
    penalty_max: float = 100.0
    mode: Literal["none", "linear"] = "none"

    def __post_init__(self) -> None:
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not self.penalty_max > 0:
            raise ValueError("penalty_max must be > 0")
        if self.mode not in ("none", "linear"):
            raise ValueError(f"unknown curriculum mode {self.mode!r}")


def schedule_marginal_penalties(t: int, sched: CurriculumSchedule) -> tuple[float, float]:
    """Return ``(alpha_penalty, beta_penalty)`` at iteration ``t`` of ``sched``."""
    if sched.mode == "none":
        return HARD, HARD
    T = sched.total_iters
    if t > T:
        warnings.warn(f"curriculum step {t} beyond horizon {T}; clamping", stacklevel=2)
        t = T
    if t < 0:
        raise ValueError("curriculum step must be >= 0")
    frac = t / T
    return sched.penalty_max * frac, sched.penalty_max * (1.0 - frac)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    mx = x.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(x - mx).sum(axis=axis, keepdims=True)) + mx
    return out.squeeze(axis)


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def _check_inputs(cost: np.ndarray, alpha: Marginal, beta: Marginal) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape != (len(alpha), len(beta)):
        raise ShapeError(f"cost shape {c.shape} does not match marginals ({len(alpha)}, {len(beta)})")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    return c


def _exponent(penalty: float, eps: float) -> float:
    if math.isinf(penalty):
        return 1.0
    return penalty / (penalty + eps)


def _project_hard(logp: np.ndarray, la: np.ndarray, lb: np.ndarray, hard_a: bool, hard_b: bool,
                  tol: float = 1e-14, max_iter: int = 500) -> np.ndarray:
    """Sinkhorn projection (no cost) of a near-feasible log-plan onto the hard marginals."""
    a, b = np.exp(la), np.exp(lb)
    for _ in range(max_iter):
        if hard_a:
            logp = logp + (la - _lse(logp, 1))[:, None]
        if hard_b:
            logp = logp + (lb - _lse(logp, 0))[None, :]
        if not (hard_a and hard_b):
            break
        p = np.exp(logp)
        if np.abs(p.sum(axis=1) - a).max() <= tol and np.abs(p.sum(axis=0) - b).max() <= tol:
            break
    return logp


def solve_ot(
    cost: np.ndarray,
    alpha: Marginal,
    beta: Marginal,
    cfg: OtConfig | None = None,
    init: TransportPlan | np.ndarray | None = None,
    warm_mix: float = 1e-3,
) -> TransportPlan:
    """Minimize ``<plan, cost>`` over plans matching ``alpha`` and ``beta``.

    Marginals with finite penalty are enforced softly. ``init`` warm-starts
    the proximal iteration; it is blended with the product plan (weight
    ``warm_mix``) so that cells at zero can still gain mass.
    """
    cfg = cfg or OtConfig()
    c = _check_inputs(cost, alpha, beta)
    a, b = alpha.weights, beta.weights
    hard_a, hard_b = alpha.is_hard, beta.is_hard
    both_hard = hard_a and hard_b

    spread = float(c.max() - c.min())
    scale = spread if spread > 0 else (float(np.abs(c).max()) or 1.0)
    shift = float(c.min()) if both_hard else 0.0
    cn = (c - shift) / scale
    eps = cfg.proximal_weight
    ka = _exponent(alpha.penalty / scale, eps)
    kb = _exponent(beta.penalty / scale, eps)

    product = np.outer(a, b)
    if init is None:
        start = product
    else:
        p0 = init.entries if isinstance(init, TransportPlan) else np.asarray(init, dtype=np.float64)
        if p0.shape != product.shape:
            raise ShapeError("warm-start plan has the wrong shape")
        total = p0.sum()
        p0 = p0 / total if total > 0 else product
        start = (1.0 - warm_mix) * p0 + warm_mix * product
    logp = _log(start)
    la, lb = _log(a), _log(b)
    p = start
    step_cost = cn / eps
    converged = False
    k = 0
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    for k in range(1, cfg.outer_iters + 1):
        logk = logp - step_cost
        # g carries over between proximal steps, as in the original scheme;
        # resetting it leaves a steady-state marginal error on degenerate costs
        for _ in range(cfg.inner_iters):
            if ka > 0:
                f = ka * (la - _lse(logk + g[None, :], 1))
            if kb > 0:
                g = kb * (lb - _lse(logk + f[:, None], 0))
        logp = logk + f[:, None] + g[None, :]
        p_new = np.exp(logp)
        delta = np.abs(p_new - p)
        change = float(delta.max())
        p = p_new
        # cells still draining toward zero are not a fixed point yet, even
        # when their absolute change is below stop_tol
        live = p > DUST
        draining = bool(np.any(delta[live] > DRAIN_RATE * p[live]))
        if change < cfg.stop_tol and not draining:
            row_err = float(np.abs(p.sum(axis=1) - a).max()) if hard_a else 0.0
            col_err = float(np.abs(p.sum(axis=0) - b).max()) if hard_b else 0.0
            if max(row_err, col_err) < cfg.stop_tol:
                converged = True
                break
    if hard_a or hard_b:
        logp = _project_hard(logp, la, lb, hard_a, hard_b)
        p = np.exp(logp)
    if both_hard and not converged:
        # the proximal iteration can crawl when a cell it drove toward zero
        # belongs to the optimal support; walk to a vertex and pivot to the
        # exact optimum instead of waiting for it
        vertex = sparsify_plan(round_to_polytope(p, alpha, beta), c).entries
        p = _pivot_to_optimum(vertex, c)
    return TransportPlan(p, converged=converged, iterations=k)


def _spanning_basis(support: np.ndarray, cost: np.ndarray) -> list[tuple[int, int]]:
    """Extend a forest support to a spanning tree, cheapest cells first."""
    n, m = support.shape
    parent = list(range(n + m))

    def find(u: int) -> int:
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    basis = []
    extra = [(float(cost[i, j]), i, j) for i in range(n) for j in range(m) if not support[i, j]]
    cells = [(i, j) for i, j in zip(*np.nonzero(support))] + [(i, j) for _, i, j in sorted(extra)]
    for i, j in cells:
        ri, rj = find(int(i)), find(n + int(j))
        if ri != rj:
            parent[ri] = rj
            basis.append((int(i), int(j)))
            if len(basis) == n + m - 1:
                break
    return basis


def _tree_path(basis: list[tuple[int, int]], n: int, src: int, dst: int) -> list[tuple[int, int]]:
    """Cells on the tree path from node ``src`` to node ``dst`` (rows first, then columns)."""
    adj: dict[int, list[int]] = {}
    for i, j in basis:
        adj.setdefault(i, []).append(n + j)
        adj.setdefault(n + j, []).append(i)
    prev = {src: -1}
    queue = deque([src])
    while queue:
        w = queue.popleft()
        if w == dst:
            break
        for z in adj.get(w, ()):
            if z not in prev:
                prev[z] = w
                queue.append(z)
    nodes = [dst]
    while nodes[-1] != src:
        nodes.append(prev[nodes[-1]])
    nodes.reverse()
    return [(x, y - n) if x < n else (y, x - n) for x, y in zip(nodes[:-1], nodes[1:])]


def _pivot_to_optimum(plan: np.ndarray, cost: np.ndarray, max_pivots: int | None = None) -> np.ndarray:
    """Transportation simplex from a vertex plan to an optimal vertex.

    Dual potentials come from the spanning-tree basis; the most negative
    reduced cost enters, and the first blocking cell along the cycle leaves.
    The objective never increases, so stopping at the pivot cap is safe.
    """
    n, m = cost.shape
    x = plan.copy()
    basis = _spanning_basis(x > 0, cost)
    tol = 1e-12 * max(1.0, float(np.abs(cost).max()))
    for _ in range(max_pivots or 10 * n * m):
        u = np.full(n, np.nan)
        v = np.full(m, np.nan)
        u[0] = 0.0
        pending = list(basis)
        while pending:
            rest = []
            for i, j in pending:
                if not np.isnan(u[i]):
                    v[j] = cost[i, j] - u[i]
                elif not np.isnan(v[j]):
                    u[i] = cost[i, j] - v[j]
                else:
                    rest.append((i, j))
            pending = rest
        reduced = cost - u[:, None] - v[None, :]
        k = int(np.argmin(reduced))
        if reduced.flat[k] >= -tol:
            break
        i, j = divmod(k, m)
        path = _tree_path(basis, n, i, n + j)
        minus = path[0::2]
        plus = path[1::2]
        leave = min(range(len(minus)), key=lambda q: (x[minus[q]], q))
        theta = x[minus[leave]]
        for cell in minus:
            x[cell] -= theta
        for cell in plus:
            x[cell] += theta
        x[i, j] += theta
        x[minus[leave]] = 0.0
        basis.remove(minus[leave])
        basis.append((i, j))
    return np.maximum(x, 0.0)


def round_to_polytope(plan: TransportPlan | np.ndarray, alpha: Marginal, beta: Marginal) -> TransportPlan:
    """Repair a nonnegative plan so it meets both marginals exactly.

    Rows are scaled down to at most ``alpha``, then columns to at most
    ``beta``; the missing mass is added back as the rank-one product of the
    row and column deficits.
    """
    p = plan.entries if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    a, b = alpha.weights, beta.weights
    if p.shape != (a.size, b.size):
        raise ShapeError(f"plan shape {p.shape} does not match marginals ({a.size}, {b.size})")
    if np.any(p < 0):
        raise ValueError("plan must be nonnegative")
    if p.sum() <= 0:
        raise DegenerateInputError("cannot round a plan with zero total mass")
    rows = p.sum(axis=1)
    x = np.divide(a, rows, out=np.ones_like(a), where=rows > a)
    q = p * np.minimum(x, 1.0)[:, None]
    cols = q.sum(axis=0)
    y = np.divide(b, cols, out=np.ones_like(b), where=cols > b)
    q = q * np.minimum(y, 1.0)[None, :]
    err_r = np.maximum(a - q.sum(axis=1), 0.0)
    err_c = np.maximum(b - q.sum(axis=0), 0.0)
    total = err_r.sum()
    if total > 0:
        q = q + np.outer(err_r, err_c) / total
    return TransportPlan(q, converged=getattr(plan, "converged", True), iterations=getattr(plan, "iterations", 0))


def transport_objective(
    plan: TransportPlan | np.ndarray,
    cost: np.ndarray,
    tau: float = 0.0,
    alpha: Marginal | None = None,
    beta: Marginal | None = None,
) -> float:
    """``<plan, cost> + tau * R(plan)`` plus KL penalties for soft marginals."""
    p = plan.entries if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    value = float((p * cost).sum())
    if tau:
        value += tau * plan_regularizer(p)
    for marg, sums in ((alpha, p.sum(axis=1)), (beta, p.sum(axis=0))):
        if marg is None or marg.is_hard or marg.penalty == 0:
            continue
        value += marg.penalty * _gen_kl(sums, marg.weights)
    return value


def _gen_kl(x: np.ndarray, y: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(x > 0, x * np.log(x / y), 0.0)
    return float(terms.sum() - x.sum() + y.sum())


def _find_cycle(support: np.ndarray) -> list[tuple[int, int]] | None:
    """Return an alternating cycle of cells in the bipartite support graph, if any.

    Edges are scanned in row-major order; the first edge that closes a loop
    in the growing forest yields the cycle, starting at that edge.
    """
    n, m = support.shape
    parent = list(range(n + m))

    def find(u: int) -> int:
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    adj: list[list[int]] = [[] for _ in range(n + m)]
    for i, j in zip(*np.nonzero(support)):
        i, j = int(i), int(j)
        u, v = i, n + j
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
            adj[u].append(v)
            adj[v].append(u)
            continue
        # path v -> u inside the forest
        prev = {v: -1}
        queue = deque([v])
        while queue:
            w = queue.popleft()
            if w == u:
                break
            for z in adj[w]:
                if z not in prev:
                    prev[z] = w
                    queue.append(z)
        path = [u]
        while path[-1] != v:
            path.append(prev[path[-1]])
        nodes = path[::-1]  # col j ... row i
        cells = [(i, j)]
        for x, y in zip(nodes[:-1], nodes[1:]):
            cells.append((x, y - n) if x < n else (y, x - n))
        return cells
    return None


def sparsify_plan(
    plan: TransportPlan | np.ndarray,
    cost: np.ndarray,
    tau: float = 0.0,
) -> TransportPlan:
    """Walk a feasible plan to a vertex of its polytope without raising the objective.

    Each step pushes mass around a cycle of the support until an entry hits
    zero. The objective ``<P, C> + tau*R(P)`` is concave along the cycle, so
    the better endpoint is never worse than the start; ties keep the
    endpoint that adds mass to the cycle's first cell.
    """
    p = np.array(plan.entries if isinstance(plan, TransportPlan) else plan, dtype=np.float64)
    c = np.asarray(cost, dtype=np.float64)
    for _ in range(p.size + 1):
        cycle = _find_cycle(p > 0)
        if cycle is None:
            break
        plus = tuple(np.array(cycle[0::2]).T)
        minus = tuple(np.array(cycle[1::2]).T)
        ends = []
        for sign in (1.0, -1.0):
            src = minus if sign > 0 else plus
            step = float(p[src].min())
            q = p.copy()
            q[plus] += sign * step
            q[minus] -= sign * step
            blocked = np.argmin(p[src])
            q[src[0][blocked], src[1][blocked]] = 0.0
            np.maximum(q, 0.0, out=q)
            ends.append((_walk_value(q, c, tau), q))
        (va, qa), (vb, qb) = ends
        p = qa if va <= vb else qb
    return TransportPlan(p, converged=getattr(plan, "converged", True), iterations=getattr(plan, "iterations", 0))


def _walk_value(p: np.ndarray, c: np.ndarray, tau: float) -> float:
    value = float((p * c).sum())
    if tau:
        value -= tau * float(p.max(axis=1).sum())
    return value


def _row_argmax(p: np.ndarray) -> np.ndarray:
    # np.argmax already returns the lowest index among ties
    return np.argmax(p, axis=1)


def solve_ot_regularized(
    cost: np.ndarray,
    alpha: Marginal,
    beta: Marginal,
    tau: float,
    cfg: OtConfig | None = None,
    init: TransportPlan | np.ndarray | None = None,
    history: list[float] | None = None,
) -> TransportPlan:
    """Minimize ``<plan, cost> + tau * R(plan)`` by majorize-minimize.

    Each round fixes the per-row argmax cells of the current plan, lowers
    the cost there by ``tau`` (a tight upper bound of the concave
    regularizer) and re-solves plain OT. Rounds stop once the argmax pattern
    repeats. When ``init`` is given the loop is also started from it and
    the better of the two results is returned. Objective values of accepted
    rounds are appended to ``history`` when provided.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    cfg = cfg or OtConfig()
    c = _check_inputs(cost, alpha, beta)
    base = solve_ot(c, alpha, beta, cfg, init=init)
    if tau == 0:
        if history is not None:
            history.append(transport_objective(base, c, 0.0, alpha, beta))
        return base

    hard = alpha.is_hard and beta.is_hard
    starts = [_finish(base, c, tau, alpha, beta) if hard else base]
    if init is not None:
        p0 = init.entries if isinstance(init, TransportPlan) else np.asarray(init, dtype=np.float64)
        starts.append(TransportPlan(p0))
    best: TransportPlan | None = None
    best_val = math.inf
    for start in starts:
        trace: list[float] = []
        plan = _majorize_minimize(c, alpha, beta, tau, cfg, start, hard, trace)
        val = trace[-1]
        if best is None or val < best_val:
            best, best_val = plan, val
            if history is not None:
                history[:] = trace
    assert best is not None
    return best


def _finish(plan: TransportPlan, cost: np.ndarray, tau: float, alpha: Marginal, beta: Marginal) -> TransportPlan:
    return sparsify_plan(round_to_polytope(plan, alpha, beta), cost, tau)


def _majorize_minimize(c, alpha, beta, tau, cfg, start, hard, trace):
    current = start
    current_val = transport_objective(current, c, tau, alpha, beta)
    trace.append(current_val)
    pattern = _row_argmax(current.entries)
    rows = np.arange(c.shape[0])
    converged = current.converged
    for _ in range(cfg.regularizer_max_rounds):
        augmented = c.copy()
        augmented[rows, pattern] -= tau
        cand = solve_ot(augmented, alpha, beta, cfg, init=current)
        if hard:
            cand = _finish(cand, c, tau, alpha, beta)
        cand_val = transport_objective(cand, c, tau, alpha, beta)
        if cand_val > current_val:
            break
        current, current_val = cand, cand_val
        converged = cand.converged
        trace.append(current_val)
        new_pattern = _row_argmax(current.entries)
        if np.array_equal(new_pattern, pattern):
            break
        pattern = new_pattern
    return TransportPlan(current.entries, converged=converged, iterations=current.iterations)


def snap_to_vertex(
    plan: TransportPlan,
    cost: np.ndarray,
    alpha: Marginal,
    beta: Marginal,
    tau: float = 0.0,
    dust: float = 1e-10,
) -> TransportPlan:
    """Turn a near-optimal plan into an exactly feasible vertex of the polytope.

    Entries below ``dust`` are dropped, remaining cycles are walked out
    (objective non-increasing) and the surviving forest is refilled exactly
    from the marginals. Falls back to :func:`round_to_polytope` followed by
    the walk when the thinned support cannot carry the marginals.
    """
    p = np.where(plan.entries >= dust, plan.entries, 0.0)
    if p.sum() > 0:
        walked = sparsify_plan(p, cost, tau).entries
        filled = _fill_forest(walked > 0, alpha.weights, beta.weights)
        if filled is not None:
            return TransportPlan(filled, converged=plan.converged, iterations=plan.iterations)
    return _finish(plan, cost, tau, alpha, beta)


def _fill_forest(support: np.ndarray, a: np.ndarray, b: np.ndarray, tol: float = 1e-12) -> np.ndarray | None:
    """Solve for the unique plan on a forest support by peeling leaves."""
    n, m = support.shape
    out = np.zeros((n, m))
    need = np.concatenate([a, b]).astype(np.float64)
    adj: list[set[int]] = [set() for _ in range(n + m)]
    for i, j in zip(*np.nonzero(support)):
        adj[int(i)].add(n + int(j))
        adj[n + int(j)].add(int(i))
    leaves = deque(u for u in range(n + m) if len(adj[u]) == 1)
    while leaves:
        u = leaves.popleft()
        if len(adj[u]) != 1:
            continue
        v = adj[u].pop()
        adj[v].discard(u)
        value = need[u]
        i, j = (u, v - n) if u < n else (v, u - n)
        out[i, j] = value
        need[u] = 0.0
        need[v] -= value
        if len(adj[v]) == 1:
            leaves.append(v)
    if any(adj[u] for u in range(n + m)):
        return None  # support had a cycle left
    if np.abs(need).max() > tol or out.min() < -tol:
        return None
    return np.maximum(out, 0.0)


def assignment_oracle(cost: np.ndarray) -> TransportPlan:
    """Exhaustive optimal plan for square costs under uniform marginals.

    Returns ``P / n`` for the cost-minimizing permutation matrix ``P``;
    ties go to the lexicographically smallest permutation.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError("assignment oracle needs a square cost")
    n = c.shape[0]
    if n > 8:
        raise ValueError(f"assignment oracle refuses n={n} > 8 (factorial blowup)")
    rows = np.arange(n)
    best_perm, best_val = None, math.inf
    for perm in itertools.permutations(range(n)):
        val = c[rows, perm].sum()
        if val < best_val:
            best_perm, best_val = perm, val
    out = np.zeros((n, n))
    out[rows, best_perm] = 1.0 / n
    return TransportPlan(out)
