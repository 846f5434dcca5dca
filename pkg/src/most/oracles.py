"""Brute-force reference computations used to cross-check the fast paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import make_uniform_marginal
from .descent import min_norm_weights
from .metrics import hypervolume_2d
from .problems import (
    FairnessSpec,
    SynthFlSpec,
    ZdtProblem,
    ZdtSpec,
    finite_diff_check,
    gen_fairness_problem,
    gen_synthetic_fl,
)
from .transport import assignment_oracle, solve_ot


def grid_min_norm(gradients, step: float = 0.01) -> float:
    """Smallest ``|sum w_i g_i|^2`` over a simplex lattice with spacing ``step`` (at most 3 vectors)."""
    g = np.atleast_2d(np.asarray(gradients, dtype=np.float64))
    k = g.shape[0]
    ticks = int(round(1.0 / step))
    if k == 1:
        return float(g[0] @ g[0])
    if k == 2:
        w = np.linspace(0.0, 1.0, ticks + 1)
        W = np.stack([w, 1.0 - w], axis=1)
    elif k == 3:
        a, b = np.meshgrid(np.arange(ticks + 1), np.arange(ticks + 1), indexing="ij")
        keep = a + b <= ticks
        a, b = a[keep] / ticks, b[keep] / ticks
        W = np.stack([a, b, 1.0 - a - b], axis=1)
    else:
        raise ValueError("grid oracle supports at most 3 vectors")
    V = W @ g
    return float((V * V).sum(axis=1).min())


def grid_hypervolume(points, ref, resolution: float = 1e-3) -> float:
    """Count grid-cell centers inside the dominated region (bounded by ``ref``)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo = np.minimum(pts.min(axis=0), ref)
    nx = max(1, int(np.ceil((ref[0] - lo[0]) / resolution)))
    ny = max(1, int(np.ceil((ref[1] - lo[1]) / resolution)))
    xs = lo[0] + (np.arange(nx) + 0.5) * resolution
    ys = lo[1] + (np.arange(ny) + 0.5) * resolution
    xs, ys = xs[xs < ref[0]], ys[ys < ref[1]]
    covered = np.zeros((xs.size, ys.size), dtype=bool)
    for p1, p2 in pts:
        covered |= (xs[:, None] >= p1) & (ys[None, :] >= p2)
    return float(covered.sum()) * resolution**2


@dataclass(frozen=True)
class SuiteResult:
    name: str
    cases: int
    worst: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, worst deviation {self.worst:.3e} (threshold {self.threshold:.1e})"


def check_ot(cases: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(2, 7))
        cost = rng.random((n, n))
        u = make_uniform_marginal(n)
        plan = solve_ot(cost, u, u)
        ref = assignment_oracle(cost)
        worst = max(worst, abs(float((plan.entries * cost).sum() - (ref.entries * cost).sum())))
    return SuiteResult("ot", cases, worst, 1e-6)


def check_minnorm(cases: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        k = int(rng.integers(1, 4))
        d = int(rng.integers(1, 4))
        g = rng.normal(size=(k, d))
        value = min_norm_weights(g).value
        worst = max(worst, value - grid_min_norm(g, 0.01))
    return SuiteResult("minnorm", cases, worst, 1e-4)


def check_hv(cases: int = 50, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        pts = rng.random((int(rng.integers(1, 9)), 2))
        worst = max(worst, abs(hypervolume_2d(pts, (1.0, 1.0)) - grid_hypervolume(pts, (1.0, 1.0))))
    return SuiteResult("hv", cases, worst, 2e-3)


def check_grad(points: int = 20, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    problems = [ZdtProblem(ZdtSpec(v)) for v in (1, 2, 3)]
    problems.append(gen_synthetic_fl(SynthFlSpec(n_clients=5, feature_dim=10, classes=4, seed=seed)))
    problems.append(gen_fairness_problem(FairnessSpec(n_samples=200, seed=seed)))
    worst = 0.0
    cases = 0
    for prob in problems:
        for _ in range(points):
            theta = rng.normal(size=prob.param_dim)
            worst = max(worst, finite_diff_check(prob, theta, 1e-6))
            cases += 1
    return SuiteResult("grad", cases, worst, 1e-5)


SUITES = {"ot": check_ot, "minnorm": check_minnorm, "hv": check_hv, "grad": check_grad}


def run_suites(name: str) -> list[SuiteResult]:
    if name == "all":
        return [fn() for fn in SUITES.values()]
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; valid: {', '.join([*SUITES, 'all'])}")
    return [SUITES[name]()]
