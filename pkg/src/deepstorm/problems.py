"""Local objectives in expectation form over per-agent data shards.

Each agent ``i`` holds a shard of samples and ``f_i`` is the average
per-sample loss over that shard. The global smooth part is the average of the
agent averages, ``f = (1/N) sum_i f_i``.

Two losses ship:

* ``quadratic``: ``f_i(x; s) = ||x - s||^2 / 2`` for sample centres ``s``.
* ``logistic_l1``: ``f_i(x; (a, b)) = log(1 + exp(-b <a, x>))`` with labels in
  ``{-1, +1}``; the L1 term lives in the attached :class:`Regularizer`.

Randomness: every agent draws batches from its own generator, spawned from a
root seed with ``SeedSequence(root, spawn_key=(0, agent))``. See
:func:`agent_streams`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError
from .proximal import Regularizer

PROBLEM_KINDS = ("quadratic", "logistic_l1")

# spawn_key prefixes; keeps agent, selection and init streams disjoint
AGENT_STREAM = 0
SELECTION_STREAM = 1
INIT_STREAM = 2


def agent_streams(root_seed: int, n_agents: int) -> list[np.random.Generator]:
    """One independent generator per agent, derived from ``root_seed``."""
    return [
        np.random.Generator(np.random.PCG64(np.random.SeedSequence(root_seed, spawn_key=(AGENT_STREAM, i))))
        for i in range(n_agents)
    ]


def named_stream(root_seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(root_seed, spawn_key=(key,))))


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    kind: str
    features: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...]
    regularizer: Regularizer
    smoothness_L: float
    noise_sigma: float

    def __post_init__(self):
        if self.kind not in PROBLEM_KINDS:
            raise ConfigError(f"unknown problem kind {self.kind!r}")
        if len(self.features) != len(self.labels) or not self.features:
            raise ConfigError("need one (features, labels) shard per agent")
        sizes = [a.shape[0] for a in self.features]
        if min(sizes) < 1:
            raise ConfigError("every shard must be non-empty")
        for a in self.features:
            a.setflags(write=False)
        for b in self.labels:
            b.setflags(write=False)
        # zero-padded (N, max shard, dim) copies for vectorised batch gradients
        n, top = len(sizes), max(sizes)
        fa = np.zeros((n, top, self.features[0].shape[1]))
        fb = np.zeros((n, top))
        for i, (a, b) in enumerate(zip(self.features, self.labels)):
            fa[i, : a.shape[0]] = a
            fb[i, : b.shape[0]] = b
        object.__setattr__(self, "_padded", (fa, fb))
        # pooled samples weighted 1/(N M_i): sums over them give averages of agent averages
        w = np.concatenate([np.full(m, 1.0 / (n * m)) for m in sizes])
        object.__setattr__(self, "_pooled", (np.concatenate(self.features), np.concatenate(self.labels), w))

    @property
    def n_agents(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features[0].shape[1]

    @property
    def shard_sizes(self) -> list[int]:
        return [a.shape[0] for a in self.features]

    def digest(self) -> str:
        """Content hash of the data, regularizer and constants."""
        h = hashlib.sha256()
        h.update(repr((self.kind, self.regularizer, self.smoothness_L, self.noise_sigma)).encode())
        for a, b in zip(self.features, self.labels):
            h.update(np.ascontiguousarray(a).tobytes())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Batch:
    """Sample ids drawn by one agent. ``full`` marks a deterministic pass over the shard."""

    agent: int
    sample_ids: np.ndarray
    full: bool = False

    @property
    def size(self) -> int:
        return len(self.sample_ids)


def _sample_grads(p: ProblemInstance, a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Mean per-sample gradient over rows of ``a`` at each row of ``x`` (shape (q, dim))."""
    if p.kind == "quadratic":
        return x - a.mean(axis=0)
    margins = (x @ a.T) * b  # (q, m)
    weights = -b * expit(-margins)
    return weights @ a / a.shape[0]


def _sample_losses(p: ProblemInstance, a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    if p.kind == "quadratic":
        return 0.5 * ((x[:, None, :] - a[None]) ** 2).sum(axis=2).mean(axis=1)
    return np.logaddexp(0.0, -(x @ a.T) * b).mean(axis=1)


def _as_points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def full_gradient(p: ProblemInstance, agent: int, x: np.ndarray) -> np.ndarray:
    """Exact gradient of ``f_agent`` (average over the whole shard).

    ``x`` may be a single point or a stack of points (one per row).
    """
    pts, single = _as_points(x)
    g = _sample_grads(p, p.features[agent], p.labels[agent], pts)
    return g[0] if single else g


def stochastic_gradient(p: ProblemInstance, agent: int, x: np.ndarray, batch: Batch) -> np.ndarray:
    """Mean per-sample gradient over ``batch`` (ids may repeat)."""
    if batch.agent != agent:
        raise ValueError(f"batch belongs to agent {batch.agent}, not {agent}")
    if batch.size == 0:
        raise ValueError("empty batch")
    ids = batch.sample_ids
    pts, single = _as_points(x)
    g = _sample_grads(p, p.features[agent][ids], p.labels[agent][ids], pts)
    return g[0] if single else g


def batch_gradients(p: ProblemInstance, batches: list[Batch], points: np.ndarray) -> np.ndarray:
    """Mean batch gradient for every agent at several points.

    ``batches[i]`` belongs to agent ``i`` and ``points`` has shape
    ``(N, q, dim)``; returns the same shape. Sampled batches of a common
    size are evaluated in one vectorised pass; anything else falls back to
    :func:`stochastic_gradient` per agent.
    """
    points = np.asarray(points, dtype=float)
    sizes = {b.size for b in batches}
    if any(b.full for b in batches) or len(sizes) != 1 or [b.agent for b in batches] != list(range(p.n_agents)):
        return np.stack([stochastic_gradient(p, b.agent, points[b.agent], b) for b in batches])
    m = sizes.pop()
    if m == 0:
        raise ValueError("empty batch")
    fa, fb = p._padded
    ids = np.stack([b.sample_ids for b in batches])
    rows = np.arange(p.n_agents)[:, None]
    a = fa[rows, ids]  # (N, m, dim)
    if p.kind == "quadratic":
        return points - a.mean(axis=1)[:, None, :]
    b = fb[rows, ids][:, None, :]  # (N, 1, m)
    weights = -b * expit(-np.matmul(points, a.transpose(0, 2, 1)) * b)
    return np.matmul(weights, a) / m


def per_sample_gradients(p: ProblemInstance, agent: int, x: np.ndarray) -> np.ndarray:
    """Gradient of every sample in the shard at ``x``; shape (shard size, dim)."""
    a, b = p.features[agent], p.labels[agent]
    x = np.asarray(x, dtype=float)
    if p.kind == "quadratic":
        return x[None, :] - a
    return (-b * expit(-(a @ x) * b))[:, None] * a


def sample_batch(p: ProblemInstance, agent: int, m: int, rng: np.random.Generator) -> Batch:
    """Draw ``m`` ids uniformly with replacement from the agent's shard."""
    if m < 1:
        raise ValueError(f"batch size must be >= 1, got {m}")
    return Batch(agent, rng.integers(0, p.shard_sizes[agent], size=m))


def full_batch(p: ProblemInstance, agent: int) -> Batch:
    return Batch(agent, np.arange(p.shard_sizes[agent]), full=True)


def local_loss(p: ProblemInstance, agent: int, x: np.ndarray) -> float:
    pts, _ = _as_points(x)
    return float(_sample_losses(p, p.features[agent], p.labels[agent], pts)[0])


def smooth_loss(p: ProblemInstance, x: np.ndarray) -> float:
    """``f(x) = (1/N) sum_i f_i(x)``."""
    a, b, w = p._pooled
    x = np.asarray(x, dtype=float)
    if p.kind == "quadratic":
        return float(0.5 * (((x - a) ** 2).sum(axis=1) @ w))
    return float(np.logaddexp(0.0, -(a @ x) * b) @ w)


def objective(p: ProblemInstance, x: np.ndarray) -> float:
    """Composite objective ``phi(x) = f(x) + r(x)``."""
    return smooth_loss(p, x) + p.regularizer.value(x)


def global_gradient(p: ProblemInstance, x: np.ndarray) -> np.ndarray:
    """``grad f`` at a point or at each row of a stack of points."""
    a, b, w = p._pooled
    pts, single = _as_points(x)
    if p.kind == "quadratic":
        g = pts - w @ a
    else:
        g = (-b * w * expit(-(pts @ a.T) * b)) @ a
    return g[0] if single else g


def local_gradients(p: ProblemInstance, X: np.ndarray) -> np.ndarray:
    """Stacked ``grad f_i(x_i)``, one row per agent."""
    return np.stack([full_gradient(p, i, X[i]) for i in range(p.n_agents)])


def accuracy(p: ProblemInstance, x: np.ndarray) -> float:
    """Training accuracy of the linear classifier ``sign(<a, x>)``; NaN for quadratics."""
    if p.kind != "logistic_l1":
        return float("nan")
    a, b, _ = p._pooled
    return float(np.mean(np.where(a @ x >= 0, 1.0, -1.0) == b))


# ---------------------------------------------------------------------------
# constructors


def quadratic_from_samples(shards, lam: float = 0.0) -> ProblemInstance:
    """Quadratic instance from explicit per-agent sample centres."""
    feats = tuple(np.atleast_2d(np.asarray(s, dtype=float)).copy() for s in shards)
    sigma_sq = max(float(((a - a.mean(axis=0)) ** 2).sum(axis=1).mean()) for a in feats)
    reg = Regularizer.l1(lam) if lam > 0 else Regularizer.zero()
    return ProblemInstance(
        kind="quadratic",
        features=feats,
        labels=tuple(np.zeros(a.shape[0]) for a in feats),
        regularizer=reg,
        smoothness_L=1.0,
        noise_sigma=float(np.sqrt(sigma_sq)),
    )


def make_quadratic(
    n_agents: int,
    dim: int,
    seed: int,
    heterogeneity: float = 1.0,
    samples_per_agent: int = 32,
    noise: float = 1.0,
    lam: float = 0.0,
) -> ProblemInstance:
    """Quadratic test problem with a known optimum.

    Agent centres are ``c_i = c + heterogeneity * g_i`` around a shared ``c``;
    each shard holds ``samples_per_agent`` noisy copies re-centred so the shard
    mean is exactly ``c_i``. The smooth part is minimised at ``mean(c_i)``.
    """
    if dim < 1 or n_agents < 1 or samples_per_agent < 1:
        raise ConfigError("need dim, n_agents and samples_per_agent >= 1")
    rng = np.random.default_rng(seed)
    base = rng.standard_normal(dim)
    centres = base + heterogeneity * rng.standard_normal((n_agents, dim))
    shards = []
    for c in centres:
        e = noise * rng.standard_normal((samples_per_agent, dim))
        shards.append(c + (e - e.mean(axis=0)))
    return quadratic_from_samples(shards, lam)


def quadratic_minimizer(p: ProblemInstance) -> np.ndarray:
    """Composite minimiser: soft-threshold of the mean centre."""
    from .proximal import prox

    centre = np.mean([a.mean(axis=0) for a in p.features], axis=0)
    return prox(p.regularizer, 1.0, centre)


def logistic_from_data(
    features: np.ndarray,
    labels: np.ndarray,
    n_agents: int,
    seed: int,
    lam: float = 1e-4,
) -> ProblemInstance:
    """Shuffle labelled data, split it evenly across agents, attach L1.

    Labels may be given as {0, 1} or {-1, +1}.
    """
    a = np.asarray(features, dtype=float)
    b = np.asarray(labels, dtype=float)
    if a.ndim != 2 or b.shape != (a.shape[0],):
        raise ConfigError("features must be (n, p) and labels (n,)")
    if a.shape[0] < n_agents:
        raise ConfigError(f"need at least one sample per agent ({a.shape[0]} < {n_agents})")
    b = np.where(b > 0, 1.0, -1.0)
    if np.all(b == b[0]):
        raise ConfigError("degenerate data: all labels are equal")
    perm = np.random.default_rng(seed).permutation(a.shape[0])
    parts = np.array_split(perm, n_agents)
    feats = tuple(a[idx].copy() for idx in parts)
    labs = tuple(b[idx].copy() for idx in parts)
    sq_norms = [(f**2).sum(axis=1) for f in feats]
    # per-sample Hessian is at most ||a||^2/4 * I, so this bounds every
    # pairwise per-sample gradient ratio (mean-squared smoothness a fortiori)
    L = max(float(s.max()) for s in sq_norms) / 4.0
    # ||grad f(x; xi)|| <= ||a||, so E||g - Eg||^2 <= mean ||a||^2
    sigma_sq = max(float(s.mean()) for s in sq_norms)
    return ProblemInstance(
        kind="logistic_l1",
        features=feats,
        labels=labs,
        regularizer=Regularizer.l1(lam) if lam > 0 else Regularizer.zero(),
        smoothness_L=L,
        noise_sigma=float(np.sqrt(sigma_sq)),
    )


def planted_logistic_data(
    n_samples: int, dim: int, sparsity: float, seed: int, feature_scale: float = 1.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Synthetic data with a planted sparse weight vector.

    Features are Gaussian with ``E||a||^2 = feature_scale^2``. A fraction
    ``sparsity`` of the weights is non-zero, scaled so the logits have unit
    order-3 spread; labels are Bernoulli draws from the logistic model.
    Returns ``(features, labels, weights)``.
    """
    if not 0.0 < sparsity <= 1.0:
        raise ConfigError(f"sparsity must lie in (0, 1], got {sparsity}")
    rng = np.random.default_rng(seed)
    k = max(1, int(round(sparsity * dim)))
    support = rng.choice(dim, size=k, replace=False)
    w = np.zeros(dim)
    w[support] = rng.choice([-1.0, 1.0], size=k) * rng.uniform(1.0, 2.0, size=k)
    w *= 3.0 * np.sqrt(dim / (2.5 * k)) / feature_scale
    a = rng.standard_normal((n_samples, dim)) * (feature_scale / np.sqrt(dim))
    b = np.where(rng.random(n_samples) < expit(a @ w), 1.0, -1.0)
    return a, b, w


def make_logistic_l1(
    n_agents: int,
    n_samples: int,
    dim: int,
    sparsity: float,
    seed: int,
    lam: float = 1e-4,
    feature_scale: float = 1.0,
) -> ProblemInstance:
    """L1-regularised logistic regression on planted sparse synthetic data."""
    if n_samples < n_agents:
        raise ConfigError(f"n_samples ({n_samples}) must be >= n_agents ({n_agents})")
    a, b, _ = planted_logistic_data(n_samples, dim, sparsity, seed, feature_scale)
    return logistic_from_data(a, b, n_agents, seed, lam)


def save_dataset(path: str | Path, features: np.ndarray, labels: np.ndarray) -> None:
    """One sample per row: features then label, comma separated."""
    rows = np.column_stack([np.asarray(features, dtype=float), np.asarray(labels, dtype=float)])
    np.savetxt(path, rows, fmt="%.17g", delimiter=",")


def load_dataset(path: str | Path, delimiter: str = ",") -> tuple[np.ndarray, np.ndarray]:
    rows = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    if rows.shape[1] < 2:
        raise ConfigError(f"{path}: need at least one feature column and a label column")
    return rows[:, :-1], rows[:, -1]
