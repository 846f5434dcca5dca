"""Outer loop: alternate optimal matching and plan-weighted descent.

:func:`run_most` runs the matching method; :func:`run_baseline` runs the
two reference methods (random linear scalarizations and MGDA restarts).
All of them emit the same :class:`RunRecord`.
"""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .core import (
    Marginal,
    Problem,
    SolutionSet,
    TransportPlan,
    plan_diversity,
    plan_regularizer,
)
from .descent import DescentResult, MinNormConfig, direction_from_gradients
from .metrics import sparsity_fraction, symmetric_kl
from .transport import (
    ZERO_TOL,
    CurriculumSchedule,
    OtConfig,
    schedule_marginal_penalties,
    snap_to_vertex,
    solve_ot_regularized,
    transport_objective,
)

Method = Literal["most", "linearization", "mgda_restarts"]
THREADS_ENV = "MOST_NUM_THREADS"


@dataclass(frozen=True)
class RunConfig:
    m: int = 5
    T: int = 100
    K: int = 1
    eta: float = 0.1
    tau: float = 0.0
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    ot: OtConfig = field(default_factory=OtConfig)
    minnorm: MinNormConfig = field(default_factory=MinNormConfig)
    seed: int = 0
    method: Method = "most"
    init_scale: float = 1.0
    # linearization only: "dirichlet" samples weights, "uniform" uses 1/n
    linearization_weights: Literal["dirichlet", "uniform"] = "dirichlet"

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.method not in ("most", "linearization", "mgda_restarts"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")


@dataclass
class IterStats:
    t: int
    losses: np.ndarray  # n x m, at the iterate the plan was computed on
    plan: TransportPlan
    potential: float
    sparsity: float
    regularizer: float
    diversity: float
    plan_kl: float
    d_sq_norms: np.ndarray
    contract_residual: float
    seconds: float


@dataclass
class RunRecord:
    method: str
    seed: int
    initial_losses: np.ndarray
    iterations: list[IterStats] = field(default_factory=list)
    final_losses: np.ndarray | None = None
    solutions: SolutionSet | None = None
    plan: TransportPlan | None = None
    error: str | None = None

    @property
    def potentials(self) -> np.ndarray:
        return np.array([it.potential for it in self.iterations])

    @property
    def d_sq_norms(self) -> np.ndarray:
        """``T x m`` squared direction norms at the start of each outer step."""
        return np.array([it.d_sq_norms for it in self.iterations]).reshape(len(self.iterations), -1)


def child_seed(seed: int, name: str, index: int = 0) -> int:
    """Independent 64-bit stream for a named component."""
    digest = hashlib.blake2b(f"{name}:{index}".encode(), digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(digest, "little")) & 0xFFFF_FFFF_FFFF_FFFF


def initial_params(problem: Problem, cfg: RunConfig) -> np.ndarray:
    rng = np.random.default_rng(child_seed(cfg.seed, "init"))
    return rng.normal(0.0, cfg.init_scale, size=(cfg.m, problem.param_dim))


def _threads(m: int) -> int:
    try:
        cap = int(os.environ.get(THREADS_ENV, "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, m))


def _eval_columns(problem: Problem, thetas: np.ndarray, pool: ThreadPoolExecutor | None):
    if pool is None:
        out = [problem.eval_all(th) for th in thetas]
    else:
        out = list(pool.map(problem.eval_all, thetas))
    values = np.column_stack([v for v, _ in out])
    grads = [g for _, g in out]
    return values, grads


def _plan_kl(prev: TransportPlan | None, plan: TransportPlan) -> float:
    return float("nan") if prev is None else symmetric_kl(prev, plan)


def _stats(t, losses, plan, potential, prev, results, seconds) -> IterStats:
    return IterStats(
        t=t,
        losses=losses,
        plan=plan,
        potential=potential,
        sparsity=sparsity_fraction(plan, ZERO_TOL),
        regularizer=plan_regularizer(plan),
        diversity=plan_diversity(plan) if plan.m > 1 else 0.0,
        plan_kl=_plan_kl(prev, plan),
        d_sq_norms=np.array([r.sq_norm for r in results]),
        contract_residual=max((r.contract_residual for r in results), default=0.0),
        seconds=seconds,
    )


def _descend(problem, theta, gamma_col, grads0, values0, cfg: RunConfig) -> tuple[np.ndarray, DescentResult]:
    first = direction_from_gradients(grads0, gamma_col, cfg.minnorm, losses=values0)
    theta = theta + cfg.eta * first.direction
    for _ in range(cfg.K - 1):
        values, grads = problem.eval_all(theta)
        res = direction_from_gradients(grads, gamma_col, cfg.minnorm, losses=values)
        theta = theta + cfg.eta * res.direction
    return theta, first


def _marginals(n: int, m: int, t: int, cfg: RunConfig) -> tuple[Marginal, Marginal]:
    pa, pb = schedule_marginal_penalties(t, cfg.curriculum)
    return Marginal(np.full(n, 1.0 / n), pa), Marginal(np.full(m, 1.0 / m), pb)


def match(
    losses: np.ndarray, alpha: Marginal, beta: Marginal, cfg: RunConfig, prev: TransportPlan | None
) -> TransportPlan:
    """Plan for the current loss matrix, warm-started from ``prev``.

    With hard marginals the plan is snapped to an exactly feasible vertex
    and never replaced by one that is worse than ``prev`` on this cost.
    """
    plan = solve_ot_regularized(losses, alpha, beta, cfg.tau, cfg.ot, init=prev)
    if not (alpha.is_hard and beta.is_hard):
        return plan
    plan = snap_to_vertex(plan, losses, alpha, beta, cfg.tau)
    if prev is not None and prev.shape == plan.shape:
        if transport_objective(prev, losses, cfg.tau) < transport_objective(plan, losses, cfg.tau):
            return prev
    return plan


def run_most(problem: Problem, cfg: RunConfig, init: np.ndarray | None = None) -> RunRecord:
    """Alternate optimal matching of objectives to solutions with plan-weighted descent."""
    if cfg.method != "most":
        raise ValueError("run_most needs method='most'")
    n, m = problem.n_objectives, cfg.m
    thetas = np.array(initial_params(problem, cfg) if init is None else init, dtype=np.float64)
    workers = _threads(m)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        values, grads = _eval_columns(problem, thetas, pool)
        record = RunRecord("most", cfg.seed, values.copy())
        prev: TransportPlan | None = None
        for t in range(1, cfg.T + 1):
            start = time.perf_counter()
            alpha, beta = _marginals(n, m, t, cfg)
            plan = match(values, alpha, beta, cfg, prev)
            potential = transport_objective(plan, values, cfg.tau)
            cols = plan.entries
            jobs = [(problem, thetas[j], cols[:, j], grads[j], values[:, j], cfg) for j in range(m)]
            if pool is None:
                out = [_descend(*job) for job in jobs]
            else:
                out = list(pool.map(lambda job: _descend(*job), jobs))
            results = [r for _, r in out]
            losses_t = values
            thetas = np.array([th for th, _ in out])
            values, grads = _eval_columns(problem, thetas, pool)
            record.iterations.append(
                _stats(t, losses_t, plan, potential, prev, results, time.perf_counter() - start)
            )
            prev = plan
            if not (np.all(np.isfinite(values)) and np.all(np.isfinite(thetas))):
                record.error = f"non-finite values at iteration {t}"
                break
        record.final_losses = values
        record.solutions = SolutionSet(thetas, cfg.eta, cfg.K) if np.all(np.isfinite(thetas)) else None
        record.plan = prev
        return record
    finally:
        if pool is not None:
            pool.shutdown()


class ExtendedProblem(Problem):
    """Base objectives followed by Dirichlet-weighted mixtures of them."""

    def __init__(self, base: Problem, weights: np.ndarray):
        super().__init__(weights.shape[0], base.param_dim, {"base": base.name, "weights": weights})
        self.base = base
        self.weights = weights
        self.name = f"{base.name}-extended"

    def eval_all(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        values, grads = self.base.eval_all(theta)
        return self.weights @ values, self.weights @ grads

    def eval(self, i: int, theta: np.ndarray) -> tuple[float, np.ndarray]:
        values, grads = self.base.eval_all(theta)
        return float(self.weights[i] @ values), self.weights[i] @ grads

    def __getattr__(self, name):
        # expose helpers of the wrapped problem (decision(), accuracy(), ...)
        if name == "base":
            raise AttributeError(name)
        return getattr(self.base, name)


def extend_objectives(problem: Problem, n_total: int, concentration: float, seed: int) -> ExtendedProblem:
    """Append ``n_total - n`` objectives ``sum_l w_l L_l`` with ``w ~ Dirichlet(concentration)``."""
    n = problem.n_objectives
    if n_total <= n:
        raise ValueError(f"extension needs more than {n} objectives, got {n_total}")
    if not concentration > 0:
        raise ValueError("concentration must be > 0")
    rng = np.random.default_rng(child_seed(seed, "extend"))
    extra = rng.dirichlet(np.full(n, float(concentration)), size=n_total - n)
    return ExtendedProblem(problem, np.vstack([np.eye(n), extra]))


def run_baseline(problem: Problem, cfg: RunConfig, init: np.ndarray | None = None) -> RunRecord:
    """Linear scalarizations or MGDA restarts with the same record layout as :func:`run_most`.

    Each outer step runs ``K`` descent steps, so budgets match ``run_most``.
    The stored plan is ``W^T / m`` for scalarization weights ``W`` and the
    product plan for MGDA.
    """
    if cfg.method not in ("linearization", "mgda_restarts"):
        raise ValueError(f"run_baseline does not handle method {cfg.method!r}")
    n, m = problem.n_objectives, cfg.m
    thetas = np.array(initial_params(problem, cfg) if init is None else init, dtype=np.float64)
    if cfg.method == "linearization":
        if cfg.linearization_weights == "uniform":
            W = np.full((m, n), 1.0 / n)
        else:
            rng = np.random.default_rng(child_seed(cfg.seed, "scalarization"))
            W = rng.dirichlet(np.ones(n), size=m)
        plan = TransportPlan(W.T / m)
    else:
        W = None
        plan = TransportPlan(np.full((n, m), 1.0 / (n * m)))

    values, grads = _eval_columns(problem, thetas, None)
    record = RunRecord(cfg.method, cfg.seed, values.copy())
    prev = None
    for t in range(1, cfg.T + 1):
        start = time.perf_counter()
        losses_t = values
        results = []
        new = []
        for j in range(m):
            theta = thetas[j]
            g = grads[j]
            first = None
            for k in range(cfg.K):
                if k > 0:
                    _, g = problem.eval_all(theta)
                if W is not None:
                    d = -(W[j] @ g)
                    res = DescentResult(d, W[j], np.arange(n), float(d @ d))
                else:
                    res = direction_from_gradients(g, np.ones(n), cfg.minnorm)
                if first is None:
                    first = res
                theta = theta + cfg.eta * res.direction
            results.append(first)
            new.append(theta)
        thetas = np.array(new)
        values, grads = _eval_columns(problem, thetas, None)
        potential = float((plan.entries * losses_t).sum())
        stats = _stats(t, losses_t, plan, potential, prev, results, time.perf_counter() - start)
        if W is not None:
            stats.contract_residual = float("nan")
        record.iterations.append(stats)
        prev = plan
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(thetas))):
            record.error = f"non-finite values at iteration {t}"
            break
    record.final_losses = values
    record.solutions = SolutionSet(thetas, cfg.eta, cfg.K) if np.all(np.isfinite(thetas)) else None
    record.plan = plan if cfg.T > 0 else None
    return record


def run(problem: Problem, cfg: RunConfig, init: np.ndarray | None = None) -> RunRecord:
    if cfg.method == "most":
        return run_most(problem, cfg, init)
    return run_baseline(problem, cfg, init)


def select_solutions(loss_matrix: np.ndarray) -> np.ndarray:
    """Per objective, the index of the solution with the lowest loss (ties -> lowest index)."""
    return np.argmin(np.asarray(loss_matrix), axis=1)
