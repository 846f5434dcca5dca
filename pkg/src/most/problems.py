"""Benchmark objective families with analytic gradients.

* ZDT-1/2/3 over unconstrained parameters squashed into the unit box.
* Synthetic federated data: one multinomial logistic loss per client.
* A two-objective fairness problem: classification loss and a squared
  covariance between the sensitive attribute and the decision score.
* A convex quadratic family used for rate checks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .core import Problem

SPLITS = ("train", "val", "test")


# --------------------------------------------------------------------------- ZDT


@dataclass(frozen=True)
class ZdtSpec:
    variant: Literal[1, 2, 3] = 1
    dim: int = 30
    squash: bool = True

    def __post_init__(self) -> None:
        if self.variant not in (1, 2, 3):
            raise ValueError(f"unknown ZDT variant {self.variant}")
        if self.dim < 2:
            raise ValueError("ZDT needs dim >= 2")


def zdt_objectives(variant: int, x: np.ndarray) -> np.ndarray:
    """(f1, f2) at decision vector ``x`` in the unit box."""
    x = np.asarray(x, dtype=np.float64)
    f1 = x[0]
    g = 1.0 + 9.0 * x[1:].sum() / (x.size - 1)
    r = f1 / g
    if variant == 1:
        h = 1.0 - np.sqrt(r)
    elif variant == 2:
        h = 1.0 - r**2
    elif variant == 3:
        h = 1.0 - np.sqrt(r) - r * np.sin(10.0 * np.pi * f1)
    else:
        raise ValueError(f"unknown ZDT variant {variant}")
    return np.array([f1, g * h])


def _zdt_with_grads(variant: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # gradients with respect to x; terms written so that x1 -> 0 stays finite
    # after multiplying by the logistic derivative x1 * (1 - x1)
    d = x.size
    x1 = x[0]
    g = 1.0 + 9.0 * x[1:].sum() / (d - 1)
    dg = 9.0 / (d - 1)
    if variant == 1:
        f2 = g - np.sqrt(x1 * g)
        df2_dx1_scaled = -0.5 * np.sqrt(g * x1)  # times x1 later replaced by (1-x1)
        df2_dg = 1.0 - 0.5 * np.sqrt(x1 / g)
    elif variant == 2:
        f2 = g - x1**2 / g
        df2_dx1_scaled = -2.0 * x1**2 / g
        df2_dg = 1.0 + (x1 / g) ** 2
    else:
        s = np.sin(10.0 * np.pi * x1)
        c = np.cos(10.0 * np.pi * x1)
        f2 = g - np.sqrt(x1 * g) - x1 * s
        df2_dx1_scaled = -0.5 * np.sqrt(g * x1) - x1 * s - 10.0 * np.pi * x1**2 * c
        df2_dg = 1.0 - 0.5 * np.sqrt(x1 / g)
    values = np.array([x1, f2])
    # "scaled" partials are x1 * df/dx1, so the chain rule through the
    # logistic only needs the remaining factor (1 - x1)
    return values, np.array([df2_dx1_scaled, df2_dg * dg])


class ZdtProblem(Problem):
    """ZDT test problem on ``theta`` with ``x = logistic(theta)`` elementwise."""

    def __init__(self, spec: ZdtSpec = ZdtSpec()):
        super().__init__(2, spec.dim, {"variant": spec.variant})
        self.spec = spec
        self.name = f"zdt{spec.variant}"

    def decision(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        return expit(theta) if self.spec.squash else np.clip(theta, 0.0, 1.0)

    def eval_all(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError("non-finite parameters")
        x = self.decision(theta)
        values, (f2_x1_scaled, f2_g) = _zdt_with_grads(self.spec.variant, x)
        if self.spec.squash:
            dx = x * (1.0 - x)
            one_minus = 1.0 - x[0]
        else:
            dx = np.ones_like(x)
            one_minus = 1.0 / x[0] if x[0] > 0 else 0.0
        grads = np.zeros((2, x.size))
        grads[0, 0] = dx[0]
        grads[1, 0] = f2_x1_scaled * one_minus
        grads[1, 1:] = f2_g * dx[1:]
        return values, grads

    def eval(self, i: int, theta: np.ndarray) -> tuple[float, np.ndarray]:
        values, grads = self.eval_all(theta)
        return float(values[i]), grads[i]


# ------------------------------------------------------------- quadratic family


class QuadraticProblem(Problem):
    """``L_i(theta) = 0.5 * sum_k a_ik (theta_k - c_ik)^2`` with positive curvatures ``a``."""

    def __init__(self, centers: np.ndarray, curvatures: np.ndarray | None = None):
        c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        a = np.ones_like(c) if curvatures is None else np.asarray(curvatures, dtype=np.float64)
        if a.shape != c.shape or np.any(a <= 0):
            raise ValueError("curvatures must be positive and match centers")
        super().__init__(c.shape[0], c.shape[1])
        self.centers = c
        self.curvatures = a
        self.name = "quadratic"

    @classmethod
    def random(cls, n: int, dim: int, seed: int = 0, spread: float = 1.0) -> QuadraticProblem:
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, spread, size=(n, dim)), rng.uniform(0.5, 2.0, size=(n, dim)))

    def eval_all(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        diff = np.asarray(theta, dtype=np.float64)[None, :] - self.centers
        grads = self.curvatures * diff
        return 0.5 * (grads * diff).sum(axis=1), grads

    def eval(self, i: int, theta: np.ndarray) -> tuple[float, np.ndarray]:
        values, grads = self.eval_all(theta)
        return float(values[i]), grads[i]


# ------------------------------------------------------------ logistic clients


@dataclass
class ClientData:
    """Per-client splits. ``sensitive`` is only set for the fairness data."""

    X: dict[str, np.ndarray]
    y: dict[str, np.ndarray]
    sensitive: dict[str, np.ndarray] | None = None

    def size(self, split: str = "train") -> int:
        return int(self.y[split].size)


def _xent(theta: np.ndarray, X: np.ndarray, y: np.ndarray, n_classes: int) -> tuple[float, np.ndarray]:
    d = X.shape[1]
    W = theta[: n_classes * d].reshape(n_classes, d)
    b = theta[n_classes * d :]
    logits = X @ W.T + b
    logp = log_softmax(logits, axis=1)
    N = y.size
    loss = -float(logp[np.arange(N), y].mean())
    resid = np.exp(logp)
    resid[np.arange(N), y] -= 1.0
    resid /= N
    gW = resid.T @ X
    gb = resid.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


class FederatedLogistic(Problem):
    """One multinomial logistic loss per client over a shared weight vector.

    Parameters are ``vec(W)`` (classes x features, row-major) followed by the
    bias. Objectives use the train split; :meth:`split_losses` and
    :meth:`accuracy` evaluate other splits.
    """

    def __init__(self, clients: list[ClientData], n_classes: int, metadata: dict | None = None):
        if not clients:
            raise ValueError("need at least one client")
        self.clients = clients
        self.n_classes = int(n_classes)
        self.feature_dim = clients[0].X["train"].shape[1]
        super().__init__(len(clients), self.n_classes * (self.feature_dim + 1), metadata)
        self.name = "synth_fl"

    def eval(self, i: int, theta: np.ndarray) -> tuple[float, np.ndarray]:
        c = self.clients[i]
        return _xent(np.asarray(theta, dtype=np.float64), c.X["train"], c.y["train"], self.n_classes)

    def logits(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        d = self.feature_dim
        W = theta[: self.n_classes * d].reshape(self.n_classes, d)
        return X @ W.T + theta[self.n_classes * d :]

    def split_losses(self, theta: np.ndarray, split: str) -> np.ndarray:
        return np.array(
            [_xent(theta, c.X[split], c.y[split], self.n_classes)[0] for c in self.clients]
        )

    def accuracy(self, theta: np.ndarray, split: str) -> np.ndarray:
        """Per-client accuracy on ``split``."""
        return np.array(
            [float((self.logits(theta, c.X[split]).argmax(axis=1) == c.y[split]).mean()) for c in self.clients]
        )

    def predict_proba(self, theta: np.ndarray, split: str) -> np.ndarray:
        """Class probabilities on the concatenated ``split`` of every client."""
        X = np.concatenate([c.X[split] for c in self.clients])
        return softmax(self.logits(theta, X), axis=1)


@dataclass(frozen=True)
class SynthFlSpec:
    rho1: float = 0.0
    rho2: float = 0.0
    n_clients: int = 30
    feature_dim: int = 60
    classes: int = 10
    samples_per_client: tuple[int, int] = (50, 500)
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("rho1 and rho2 must be >= 0")
        if self.n_clients < 1 or self.feature_dim < 1 or self.classes < 2:
            raise ValueError("invalid synthetic FL sizes")
        lo, hi = self.samples_per_client
        if not 5 <= lo <= hi:
            raise ValueError("samples_per_client must satisfy 5 <= low <= high")
        if abs(sum(self.split) - 1.0) > 1e-12 or min(self.split) <= 0:
            raise ValueError("split fractions must be positive and sum to 1")


def _split_indices(n: int, fractions: tuple[float, float, float], rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n)))
    n_val = min(n_val, n - n_train - 1)
    return [perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]]


def gen_synthetic_fl(spec: SynthFlSpec = SynthFlSpec()) -> FederatedLogistic:
    """Heterogeneous clients with their own generating logistic models.

    ``rho1`` spreads the generating models across clients and ``rho2``
    spreads the feature distributions.
    """
    rng = np.random.default_rng(spec.seed)
    d, C = spec.feature_dim, spec.classes
    cov_diag = np.arange(1, d + 1, dtype=np.float64) ** -1.2
    lo, hi = spec.samples_per_client
    sizes = np.exp(rng.uniform(np.log(lo), np.log(hi), size=spec.n_clients)).astype(int)
    clients: list[ClientData] = []
    truth = []
    for k in range(spec.n_clients):
        u = rng.normal(0.0, spec.rho1)
        B = rng.normal(0.0, spec.rho2)
        W = rng.normal(u, 1.0, size=(C, d))
        b = rng.normal(u, 1.0, size=C)
        v = rng.normal(B, 1.0, size=d)
        X = v + rng.normal(size=(sizes[k], d)) * np.sqrt(cov_diag)
        y = np.argmax(X @ W.T + b, axis=1)
        parts = _split_indices(sizes[k], spec.split, rng)
        clients.append(
            ClientData(
                X={s: X[idx] for s, idx in zip(SPLITS, parts)},
                y={s: y[idx] for s, idx in zip(SPLITS, parts)},
            )
        )
        truth.append(np.concatenate([W.ravel(), b]))
    meta = {"spec": spec, "generating_params": np.array(truth)}
    return FederatedLogistic(clients, C, meta)


def label_tv_heterogeneity(problem: FederatedLogistic, split: str = "train") -> float:
    """Mean total-variation distance between client label distributions over client pairs."""
    hists = []
    for c in problem.clients:
        h = np.bincount(c.y[split], minlength=problem.n_classes).astype(np.float64)
        hists.append(h / h.sum())
    H = np.array(hists)
    n = H.shape[0]
    if n < 2:
        return 0.0
    tv = 0.5 * np.abs(H[:, None, :] - H[None, :, :]).sum(axis=2)
    return float(tv[np.triu_indices(n, 1)].mean())


# ---------------------------------------------------------------- fairness


@dataclass(frozen=True)
class FairnessSpec:
    n_samples: int = 2000
    correlation: float = 0.6
    test_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_samples < 10:
            raise ValueError("n_samples must be >= 10")
        if not -1.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must lie in [-1, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


class FairnessProblem(Problem):
    """Binary logistic loss (objective 0) and squared score covariance with ``z`` (objective 1).

    Parameters are ``(w_1, ..., w_d, bias)``.
    """

    def __init__(self, data: ClientData, metadata: dict | None = None):
        self.data = data
        d = data.X["train"].shape[1]
        super().__init__(2, d + 1, metadata)
        self.name = "fairness"
        X = data.X["train"]
        self._Xb = np.hstack([X, np.ones((X.shape[0], 1))])
        self._y = data.y["train"].astype(np.float64)
        z = data.sensitive["train"].astype(np.float64)
        # (1/N) sum_s (z_s - zbar) x_s, so the covariance is linear in theta
        self._cov_dir = ((z - z.mean())[:, None] * self._Xb).mean(axis=0)

    def eval_all(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        s = self._Xb @ theta
        # log(1 + exp(-s)) for y=1, log(1 + exp(s)) for y=0
        signed = np.where(self._y > 0, -s, s)
        loss = float(np.logaddexp(0.0, signed).mean())
        grad = ((expit(s) - self._y)[:, None] * self._Xb).mean(axis=0)
        cov = float(self._cov_dir @ theta)
        return np.array([loss, cov**2]), np.vstack([grad, 2.0 * cov * self._cov_dir])

    def eval(self, i: int, theta: np.ndarray) -> tuple[float, np.ndarray]:
        values, grads = self.eval_all(theta)
        return float(values[i]), grads[i]

    def disparate_impact(self, theta: np.ndarray, split: str = "test") -> float:
        """p%-rule ratio ``min(P(yhat=1|z=0)/P(yhat=1|z=1), inverse)`` on ``split``."""
        X = self.data.X[split]
        z = self.data.sensitive[split]
        pred = (X @ theta[:-1] + theta[-1]) > 0
        rates = [pred[z == v].mean() if np.any(z == v) else 0.0 for v in (0, 1)]
        if max(rates) == 0:
            return 1.0
        return float(min(rates) / max(rates))

    def accuracy(self, theta: np.ndarray, split: str = "test") -> float:
        X = self.data.X[split]
        pred = (X @ theta[:-1] + theta[-1]) > 0
        return float((pred == (self.data.y[split] > 0)).mean())


def gen_fairness_problem(spec: FairnessSpec = FairnessSpec()) -> FairnessProblem:
    """Two Gaussian classes in 2-D; ``z`` agrees with the label with probability ``(1 + correlation) / 2``."""
    rng = np.random.default_rng(spec.seed)
    n_pos = spec.n_samples // 2
    n_neg = spec.n_samples - n_pos
    X_pos = rng.multivariate_normal([2.0, 2.0], [[5.0, 1.0], [1.0, 5.0]], size=n_pos)
    X_neg = rng.multivariate_normal([-2.0, -2.0], [[10.0, 1.0], [1.0, 3.0]], size=n_neg)
    X = np.vstack([X_pos, X_neg])
    y = np.concatenate([np.ones(n_pos, dtype=int), np.zeros(n_neg, dtype=int)])
    agree = rng.random(spec.n_samples) < 0.5 * (1.0 + spec.correlation)
    z = np.where(agree, y, 1 - y)
    perm = rng.permutation(spec.n_samples)
    n_test = max(1, int(round(spec.test_fraction * spec.n_samples)))
    idx = {"test": perm[:n_test], "train": perm[n_test:]}
    idx["val"] = idx["test"]
    data = ClientData(
        X={s: X[i] for s, i in idx.items()},
        y={s: y[i] for s, i in idx.items()},
        sensitive={s: z[i] for s, i in idx.items()},
    )
    return FairnessProblem(data, {"spec": spec})


# ------------------------------------------------------------ gradient check


def finite_diff_check(problem: Problem, theta: np.ndarray, eps: float = 1e-6) -> float:
    """Worst ``|g - g_fd|_inf / (1 + |g_fd|_inf)`` over objectives, central differences."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    theta = np.asarray(theta, dtype=np.float64)
    _, grads = problem.eval_all(theta)
    fd = np.zeros_like(grads)
    for k in range(theta.size):
        step = np.zeros_like(theta)
        step[k] = eps
        fd[:, k] = (problem.values(theta + step) - problem.values(theta - step)) / (2.0 * eps)
    err = np.abs(grads - fd).max(axis=1) / (1.0 + np.abs(fd).max(axis=1))
    return float(err.max())


# -------------------------------------------------------------- export/load


def export_dataset(problem: FederatedLogistic | FairnessProblem, path: str | Path) -> None:
    """Write one sample per line: client, split, features, label[, sensitive]."""
    if isinstance(problem, FairnessProblem):
        clients = [problem.data]
        splits = ("train", "test")
        n_classes = 2
    else:
        clients = problem.clients
        splits = SPLITS
        n_classes = problem.n_classes
    has_z = clients[0].sensitive is not None
    d = clients[0].X["train"].shape[1]
    header = ["client", "split"] + [f"x{k}" for k in range(d)] + ["label"] + (["sensitive"] if has_z else [])
    with open(path, "w", newline="") as fh:
        fh.write(f"# classes={n_classes}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for cid, c in enumerate(clients):
            for s in splits:
                for r in range(c.y[s].size):
                    row = [cid, s] + [repr(float(v)) for v in c.X[s][r]] + [int(c.y[s][r])]
                    if has_z:
                        row.append(int(c.sensitive[s][r]))
                    w.writerow(row)


def load_dataset(path: str | Path) -> FederatedLogistic | FairnessProblem:
    """Inverse of :func:`export_dataset`."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# classes="):
            raise ValueError(f"{path}: missing '# classes=' header line")
        n_classes = int(first.split("=", 1)[1])
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    feat = [k for k, h in enumerate(header) if h.startswith("x")]
    has_z = header[-1] == "sensitive"
    label_col = header.index("label")
    grouped: dict[int, dict[str, list]] = {}
    for row in body:
        cid, split = int(row[0]), row[1]
        grouped.setdefault(cid, {}).setdefault(split, []).append(row)
    clients = []
    for cid in sorted(grouped):
        parts = grouped[cid]
        X = {s: np.array([[float(r[k]) for k in feat] for r in rs]) for s, rs in parts.items()}
        y = {s: np.array([int(r[label_col]) for r in rs]) for s, rs in parts.items()}
        z = {s: np.array([int(r[-1]) for r in rs]) for s, rs in parts.items()} if has_z else None
        clients.append(ClientData(X, y, z))
    if has_z:
        data = clients[0]
        data.X.setdefault("val", data.X["test"])
        data.y.setdefault("val", data.y["test"])
        data.sensitive.setdefault("val", data.sensitive["test"])
        return FairnessProblem(data, {"source": str(path)})
    return FederatedLogistic(clients, n_classes, {"source": str(path)})
