"""Communication graphs, mixing matrices and Chebyshev-accelerated gossip.

All objects here are immutable after construction. Matrices are dense numpy
arrays; networks in this package are small enough that full symmetric
eigendecompositions are cheap and exact.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TopologyError

GRAPH_KINDS = ("ring", "ladder", "random_connected", "complete", "path")

# Below this value mu_1 = 1/rho is numerically singular; W is already an
# exact averager and mixing short-circuits to the projector.
DEGENERATE_RHO = 1e-12
MAX_RANDOM_RETRIES = 1000


@dataclass(frozen=True)
class Graph:
    n_agents: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.n_agents < 1:
            raise TopologyError("graph needs at least one agent")
        for i, j in self.edges:
            if i == j:
                raise TopologyError(f"self-loop ({i}, {i}) is not allowed")
            if not (0 <= i < self.n_agents and 0 <= j < self.n_agents):
                raise TopologyError(f"edge ({i}, {j}) out of range")
            if i > j:
                raise TopologyError(f"edge ({i}, {j}) must be stored as (min, max)")

    @classmethod
    def from_pairs(cls, n_agents: int, pairs) -> "Graph":
        return cls(n_agents, frozenset((min(i, j), max(i, j)) for i, j in pairs))

    def neighbors(self, i: int) -> list[int]:
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_agents, self.n_agents))
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = 1.0
        return adj

    def laplacian(self) -> np.ndarray:
        """Combinatorial Laplacian D - A."""
        adj = self.adjacency()
        return np.diag(adj.sum(axis=1)) - adj

    def is_connected(self) -> bool:
        seen = {0}
        queue = deque([0])
        while queue:
            i = queue.popleft()
            for j in self.neighbors(i):
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == self.n_agents

    def is_ring(self) -> bool:
        n = self.n_agents
        if n < 3 or len(self.edges) != n:
            return False
        degrees = self.adjacency().sum(axis=1)
        return bool(np.all(degrees == 2)) and self.is_connected()


def build_graph(kind: str, n: int, seed: int = 0, density: float = 0.4) -> Graph:
    """Build a connected undirected graph of the requested family.

    ``density`` is the Erdos-Renyi edge probability for ``random_connected``;
    samples are rejected until connected, at most ``MAX_RANDOM_RETRIES`` times.
    ``ladder`` needs an even ``n >= 4``: two rails of n/2 nodes joined by rungs.
    """
    if n < 2:
        raise TopologyError(f"need n >= 2 agents, got {n}")
    if kind == "path":
        pairs = [(i, i + 1) for i in range(n - 1)]
    elif kind == "ring":
        pairs = [(i, (i + 1) % n) for i in range(n)] if n > 2 else [(0, 1)]
    elif kind == "complete":
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif kind == "ladder":
        if n < 4 or n % 2:
            raise TopologyError(f"ladder needs an even number of agents >= 4, got {n}")
        half = n // 2
        pairs = [(i, i + 1) for i in range(half - 1)]
        pairs += [(half + i, half + i + 1) for i in range(half - 1)]
        pairs += [(i, half + i) for i in range(half)]
    elif kind == "random_connected":
        if not 0.0 < density <= 1.0:
            raise TopologyError(f"density must lie in (0, 1], got {density}")
        rng = np.random.default_rng(seed)
        upper = [(i, j) for i in range(n) for j in range(i + 1, n)]
        for _ in range(MAX_RANDOM_RETRIES):
            keep = rng.random(len(upper)) < density
            g = Graph.from_pairs(n, [e for e, k in zip(upper, keep) if k])
            if g.is_connected():
                return g
        raise TopologyError(
            f"no connected sample in {MAX_RANDOM_RETRIES} draws at density "
            f"{density} for n={n}; density is too low"
        )
    else:
        raise TopologyError(f"unknown graph kind {kind!r}; expected one of {GRAPH_KINDS}")
    return Graph.from_pairs(n, pairs)


def _second_eigen_magnitude(w: np.ndarray) -> float:
    n = w.shape[0]
    try:
        eig = np.linalg.eigvalsh(w - np.full((n, n), 1.0 / n))
    except np.linalg.LinAlgError as exc:
        raise TopologyError(f"eigensolver failed: {exc}") from exc
    return float(np.max(np.abs(eig)))


@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric, doubly stochastic mixing matrix supported on a graph.

    Construction validates every structural property and stores
    ``rho = ||W - ee^T/N||_2``.
    """

    graph: Graph
    entries: np.ndarray
    rho: float = field(init=False)

    def __post_init__(self):
        w = np.array(self.entries, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "entries", w)
        n = self.graph.n_agents
        if w.shape != (n, n):
            raise TopologyError(f"mixing matrix must be {n}x{n}, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise TopologyError("mixing matrix has non-finite entries")
        if np.max(np.abs(w - w.T)) > 1e-12:
            raise TopologyError("mixing matrix is not symmetric")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-12:
            raise TopologyError("mixing matrix rows do not sum to 1")
        adj = self.graph.adjacency()
        off = ~np.eye(n, dtype=bool)
        if np.any((w[off] > 0) != (adj[off] > 0)) or np.any(w[off] < 0):
            raise TopologyError("off-diagonal support of W does not match the graph edges")
        if np.any(np.diag(w) < 0):
            raise TopologyError("negative self-weight")
        rho = _second_eigen_magnitude(w)
        if rho >= 1.0 - 1e-12:
            raise TopologyError(f"rho = {rho:.6g} >= 1: graph disconnected or W periodic")
        object.__setattr__(self, "rho", rho)

    @property
    def n_agents(self) -> int:
        return self.graph.n_agents


def laplacian_mixing(g: Graph) -> MixingMatrix:
    """``W = I - L / lambda_max(L)`` with ``L`` the combinatorial Laplacian."""
    if not g.is_connected():
        raise TopologyError("graph is not connected")
    lap = g.laplacian()
    try:
        lam_max = float(np.linalg.eigvalsh(lap)[-1])
    except np.linalg.LinAlgError as exc:
        raise TopologyError(f"eigensolver failed: {exc}") from exc
    return MixingMatrix(g, np.eye(g.n_agents) - lap / lam_max)


def uniform_ring_mixing(g: Graph) -> MixingMatrix:
    """Ring weights: 1/3 on self and on each of the two neighbours."""
    if not g.is_ring():
        raise TopologyError("uniform ring weights need a ring graph with n >= 3")
    n = g.n_agents
    w = np.eye(n) / 3.0
    for i, j in g.edges:
        w[i, j] = w[j, i] = 1.0 / 3.0
    return MixingMatrix(g, w)


def spectral_gap(w: MixingMatrix | np.ndarray) -> float:
    """Operator 2-norm of ``W - ee^T/N``.

    Despite the name this returns rho; the gap itself is ``1 - rho``.
    """
    if isinstance(w, MixingMatrix):
        return _second_eigen_magnitude(np.asarray(w.entries))
    w = np.asarray(w, dtype=float)
    if np.max(np.abs(w - w.T)) > 1e-12 or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-12:
        raise TopologyError("spectral_gap needs a symmetric row-stochastic matrix")
    return _second_eigen_magnitude(w)


def _chebyshev_apply(w: np.ndarray, rho: float, rounds: int, b: np.ndarray) -> np.ndarray:
    if rounds == 1:
        return w @ b
    if rho < DEGENERATE_RHO:
        return np.broadcast_to(b.mean(axis=0), b.shape).copy()
    mu_prev, mu = 1.0, 1.0 / rho
    b_prev, b_cur = b, w @ b
    for _ in range(1, rounds):
        mu_next = 2.0 / rho * mu - mu_prev
        b_next = (2.0 * mu / (rho * mu_next)) * (w @ b_cur) - (mu_prev / mu_next) * b_prev
        b_prev, b_cur = b_cur, b_next
        mu_prev, mu = mu, mu_next
    return b_cur


@dataclass(frozen=True)
class ChebyshevOperator:
    """Degree-``rounds`` Chebyshev polynomial of a mixing matrix.

    ``rho_tilde`` is the exact norm ``||W_T - ee^T/N||_2`` of the resulting
    operator, computed from its dense matrix.
    """

    base: MixingMatrix
    rounds: int = 1
    rho_tilde: float = field(init=False)

    def __post_init__(self):
        if self.rounds < 1:
            raise TopologyError(f"rounds must be >= 1, got {self.rounds}")
        n = self.base.n_agents
        poly = _chebyshev_apply(np.asarray(self.base.entries), self.base.rho, self.rounds, np.eye(n))
        poly = 0.5 * (poly + poly.T)
        object.__setattr__(self, "rho_tilde", _second_eigen_magnitude(poly))

    @property
    def rho(self) -> float:
        return self.base.rho

    @property
    def n_agents(self) -> int:
        return self.base.n_agents

    def matrix(self) -> np.ndarray:
        return self(np.eye(self.n_agents))

    def __call__(self, b: np.ndarray) -> np.ndarray:
        return mix(self, b)


def mix(op: ChebyshevOperator, b: np.ndarray) -> np.ndarray:
    """Apply ``op.rounds`` rounds of Chebyshev-accelerated gossip to the rows of ``b``."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != op.n_agents:
        raise TopologyError(f"input has {b.shape[0]} rows, expected {op.n_agents}")
    return _chebyshev_apply(np.asarray(op.base.entries), op.base.rho, op.rounds, b)


def chebyshev_bound(rho: float, rounds: int) -> float:
    """Upper bound ``2 (1 - sqrt(1 - rho))^T`` on the contraction of T rounds."""
    return 2.0 * (1.0 - math.sqrt(1.0 - rho)) ** rounds


def chebyshev_rounds_for_target(rho: float) -> int:
    """Rounds ``ceil(2 / sqrt(1 - rho))``, enough for ``(1 - rho_tilde)^2 >= 1/2``."""
    if not 0.0 <= rho < 1.0:
        raise TopologyError(f"rho must lie in [0, 1), got {rho}")
    return math.ceil(2.0 / math.sqrt(1.0 - rho))


def initial_rounds(rho: float, rho_tilde: float) -> int:
    """Rounds for the initial tracking mix, ``ceil(-2 ln(1 - rho_tilde) / sqrt(1 - rho))``.

    Clamped to at least one round (the formula gives 0 when rho_tilde = 0).
    """
    if not (0.0 <= rho < 1.0 and 0.0 <= rho_tilde < 1.0):
        raise TopologyError(f"need rho, rho_tilde in [0, 1), got {rho}, {rho_tilde}")
    return max(1, math.ceil(-2.0 * math.log1p(-rho_tilde) / math.sqrt(1.0 - rho)))


def make_mixing(g: Graph, scheme: str = "auto") -> MixingMatrix:
    """Mixing weights by name: ``laplacian``, ``uniform_ring`` or ``auto``.

    ``auto`` uses uniform 1/3 weights on rings and Laplacian weights elsewhere.
    """
    if scheme == "auto":
        scheme = "uniform_ring" if g.is_ring() else "laplacian"
    if scheme == "laplacian":
        return laplacian_mixing(g)
    if scheme == "uniform_ring":
        return uniform_ring_mixing(g)
    raise TopologyError(f"unknown mixing scheme {scheme!r}")


def save_matrix(path: str | Path, m: np.ndarray) -> None:
    """Write a matrix as rows of space-separated decimals (round-trip exact)."""
    np.savetxt(path, np.atleast_2d(m), fmt="%.17g", delimiter=" ")


def load_matrix(path: str | Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, dtype=float, ndmin=2))
