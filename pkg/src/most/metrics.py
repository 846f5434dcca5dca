"""Quality metrics for solution sets and transport plans."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError, TransportPlan

KL_SMOOTHING = 1e-12


class UnsupportedDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    hypervolume: float = float("nan")
    sparsity_fraction: float = float("nan")
    diversity: float = float("nan")
    plan_kl: float = float("nan")
    oracle_mean: float = float("nan")
    average_mean: float = float("nan")
    quantile_perf: list[tuple[float, float]] = field(default_factory=list)


def hypervolume_2d(points, ref) -> float:
    """Area dominated by ``points`` and bounded above by ``ref`` (minimization)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 2 or len(ref) != 2:
        raise UnsupportedDimensionError("hypervolume_2d handles exactly two objectives")
    r1, r2 = float(ref[0]), float(ref[1])
    pts = pts[(pts[:, 0] < r1) & (pts[:, 1] < r2)]
    if pts.size == 0:
        return 0.0
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    area = 0.0
    best_f2 = r2
    for k in range(pts.shape[0]):
        f1, f2 = pts[k]
        best_f2 = min(best_f2, f2)
        right = pts[k + 1, 0] if k + 1 < pts.shape[0] else r1
        area += (right - f1) * (r2 - best_f2)
    return float(area)


def _smoothed(p: np.ndarray) -> np.ndarray:
    q = p.ravel().astype(np.float64) + KL_SMOOTHING
    return q / q.sum()


def symmetric_kl(a: TransportPlan | np.ndarray, b: TransportPlan | np.ndarray) -> float:
    """``(KL(P||Q) + KL(Q||P)) / 2`` between the flattened, smoothed plans."""
    pa = a.entries if isinstance(a, TransportPlan) else np.asarray(a, dtype=np.float64)
    pb = b.entries if isinstance(b, TransportPlan) else np.asarray(b, dtype=np.float64)
    if pa.shape != pb.shape:
        raise ShapeError(f"shape mismatch {pa.shape} vs {pb.shape}")
    p, q = _smoothed(pa), _smoothed(pb)
    log_ratio = np.log(p) - np.log(q)
    return float(0.5 * ((p - q) * log_ratio).sum())


def sparsity_fraction(plan: TransportPlan | np.ndarray, zero_tol: float = 1e-8) -> float:
    """Fraction of entries strictly below ``zero_tol``."""
    if zero_tol < 0:
        raise ValueError("zero_tol must be >= 0")
    p = plan.entries if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    return float((p < zero_tol).mean())


def oracle_vs_average(loss_matrix) -> tuple[float, float]:
    """(mean over objectives of the best solution's loss, mean over all pairs)."""
    L = np.atleast_2d(np.asarray(loss_matrix, dtype=np.float64))
    if not np.all(np.isfinite(L)):
        raise ValueError("loss matrix must be finite")
    return float(L.min(axis=1).mean()), float(L.mean())


def quantile_perf(values, quantiles) -> list[tuple[float, float]]:
    """Mean of the lowest ``ceil(q * n)`` values for each ``q``.

    Pass accuracies to get the worst groups; negate losses first.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("quantile_perf needs at least one value")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    out = []
    for q in quantiles:
        if not 0.0 < q <= 1.0:
            raise ValueError(f"quantile {q} outside (0, 1]")
        # the small slack keeps 0.6 * 5 from rounding up to 4
        k = max(1, math.ceil(q * v.size - 1e-9))
        out.append((float(q), float(v[:k].mean())))
    return out


def prediction_diversity(probs: list[np.ndarray]) -> float:
    """Mean pairwise symmetric KL between the predictive distributions of several models.

    ``probs[j]`` holds per-sample class probabilities of model ``j``; the
    divergence is averaged over samples, then over unordered model pairs.
    """
    m = len(probs)
    if m < 2:
        return 0.0
    logs = [np.log(np.clip(p, KL_SMOOTHING, None)) for p in probs]
    total = 0.0
    pairs = 0
    for a in range(m):
        for b in range(a + 1, m):
            d = 0.5 * ((probs[a] - probs[b]) * (logs[a] - logs[b])).sum(axis=1)
            total += float(d.mean())
            pairs += 1
    return total / pairs
