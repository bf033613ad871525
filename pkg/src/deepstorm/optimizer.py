"""Decentralized proximal stochastic recursive momentum with gradient tracking.

One iteration, for every agent ``i`` in lock step:

1. ``Z = W_T(X)``                                  (gossip, T rounds)
2. ``x_i+ = prox_{alpha_k r}(z_i - alpha_k y_i)``
3. ``d_i+ = (1 - beta_k)(d_i + v_i - u_i) + beta_k vtilde_i`` where ``v_i`` and
   ``u_i`` average the gradients of one fresh batch at ``x_i+`` and ``x_i``
4. ``Y+ = W_T(Y + D+ - D)``                         (gossip, T rounds)

``vtilde`` is the unbiased estimator selected by :class:`EstimatorConfig`.
State is held as matrices with one row per agent. Local computation in step 3
reads only the agent's own row and RNG stream; steps 1 and 4 are the global
barriers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import problems as _problems
from .errors import CheckpointError, ConfigError, DivergenceError
from .metrics import TraceRecord, make_record
from .problems import SELECTION_STREAM, INIT_STREAM, Batch, ProblemInstance, agent_streams, named_stream
from .proximal import prox_step
from .topology import ChebyshevOperator, mix

VARIANTS = ("v1_sg", "v1_svrg", "v2")
FULL = "full"
DIVERGENCE_LIMIT = 1e12
CHECKPOINT_FORMAT = "deepstorm-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# step-size and momentum schedules


def k0_threshold(rho_tilde: float) -> int:
    """Smallest admissible offset ``ceil(2 / (1 - rho_tilde^3))``."""
    return math.ceil(2.0 / (1.0 - rho_tilde**3))


def k0_network_independent(rho_tilde: float) -> int:
    """Offset ``ceil(2 / (1 - rho_tilde)^6)`` used for the sample-complexity recipe."""
    return math.ceil(2.0 / (1.0 - rho_tilde) ** 6)


def recommended_m0(n_agents: int, iterations: int) -> int:
    """Initial batch ``ceil((N K)^(1/3))`` for the constant step size."""
    return max(1, math.ceil((n_agents * iterations) ** (1.0 / 3.0) - 1e-9))


def alpha_bound(L: float, rho_tilde: float, scale: float) -> tuple[float, float]:
    """The two caps ``scale^(1/3)/(32L)`` and ``(1-rho_tilde)^2 scale^(1/3)/(64L)``."""
    c = scale ** (1.0 / 3.0)
    return c / (32.0 * L), (1.0 - rho_tilde) ** 2 * c / (64.0 * L)


@dataclass(frozen=True)
class Schedule:
    """Step sizes ``alpha_k`` and momenta ``beta_k``.

    Rules:

    * ``theory`` with ``constant``: ``alpha_k = alpha / K^(1/3)``,
      ``beta_k = 144 L^2 alpha^2 / (N K^(2/3))``.
    * ``theory`` with ``diminishing``: ``alpha_k = alpha / (k + k0)^(1/3)``,
      ``beta_k = 1 - alpha_{k+1}/alpha_k + 48 L^2 alpha_{k+1}^2``.
    * ``practical`` (diminishing only): as above but with a free coefficient
      ``beta_coef`` in place of ``48 L^2``; requires
      ``beta_coef < 1 / (alpha_0 alpha_1)`` and leaves ``alpha`` unbounded.
    * ``manual`` (constant only): ``alpha_k = alpha``, ``beta_k = beta_coef``
      with ``beta_coef`` in ``(0, 1]``. Used for limit checks.
    """

    family: str
    alpha: float
    L: float = 1.0
    N: int = 1
    rho_tilde: float = 0.0
    horizon: int | None = None
    k0: int | None = None
    rule: str = "theory"
    beta_coef: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.family not in ("constant", "diminishing"):
            raise ConfigError(f"unknown schedule family {self.family!r}")
        if self.rule not in ("theory", "practical", "manual"):
            raise ConfigError(f"unknown schedule rule {self.rule!r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not self.L > 0:
            raise ConfigError(f"L must be positive, got {self.L}")
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if not 0.0 <= self.rho_tilde < 1.0:
            raise ConfigError(f"rho_tilde must lie in [0, 1), got {self.rho_tilde}")

        if self.rule == "manual":
            if self.family != "constant":
                raise ConfigError("manual rule needs the constant family")
            if self.beta_coef is None or not 0.0 < self.beta_coef <= 1.0:
                raise ConfigError(f"manual rule needs beta_coef in (0, 1], got {self.beta_coef}")
            return

        if self.family == "constant":
            if self.rule != "theory":
                raise ConfigError("constant family supports the theory and manual rules only")
            if self.horizon is None or self.horizon < 1:
                raise ConfigError("constant family needs a horizon K >= 1")
            cap1, cap2 = alpha_bound(self.L, self.rho_tilde, self.horizon)
            if self.alpha > cap1:
                raise ConfigError(
                    f"alpha = {self.alpha:.6g} violates alpha <= K^(1/3)/(32L) = {cap1:.6g}"
                )
            if self.alpha > cap2:
                raise ConfigError(
                    f"alpha = {self.alpha:.6g} violates "
                    f"alpha <= (1-rho_tilde)^2 K^(1/3)/(64L) = {cap2:.6g}"
                )
            return

        if self.k0 is None:
            raise ConfigError("diminishing family needs k0")
        need = k0_threshold(self.rho_tilde)
        if self.k0 < need:
            raise ConfigError(
                f"k0 = {self.k0} violates k0 >= ceil(2/(1-rho_tilde^3)) = {need}"
            )
        if self.rule == "theory":
            cap1, cap2 = alpha_bound(self.L, self.rho_tilde, self.k0)
            if self.alpha > cap1:
                raise ConfigError(
                    f"alpha = {self.alpha:.6g} violates alpha <= k0^(1/3)/(32L) = {cap1:.6g}"
                )
            if self.alpha > cap2:
                raise ConfigError(
                    f"alpha = {self.alpha:.6g} violates "
                    f"alpha <= (1-rho_tilde)^2 k0^(1/3)/(64L) = {cap2:.6g}"
                )
        else:
            a0 = self.alpha / self.k0 ** (1.0 / 3.0)
            a1 = self.alpha / (self.k0 + 1) ** (1.0 / 3.0)
            if self.beta_coef is None or not 0.0 < self.beta_coef < 1.0 / (a0 * a1):
                raise ConfigError(
                    f"practical rule needs 0 < beta_coef < 1/(alpha_0 alpha_1) = "
                    f"{1.0 / (a0 * a1):.6g}, got {self.beta_coef}"
                )

    def step_size(self, k: int) -> float:
        if self.rule == "manual":
            return self.alpha
        if self.family == "constant":
            return self.alpha / self.horizon ** (1.0 / 3.0)
        return self.alpha / (k + self.k0) ** (1.0 / 3.0)

    def momentum_coef(self) -> float:
        if self.rule == "practical":
            return self.beta_coef
        return 48.0 * self.L**2


def schedule_values(s: Schedule, k: int) -> tuple[float, float]:
    """``(alpha_k, beta_k)``; raises if ``beta_k`` falls outside ``(0, 1)``."""
    if k < 0:
        raise ValueError(f"iteration index must be >= 0, got {k}")
    alpha_k = s.step_size(k)
    if s.rule == "manual":
        return alpha_k, s.beta_coef
    if s.family == "constant":
        beta_k = 144.0 * s.L**2 * s.alpha**2 / (s.N * s.horizon ** (2.0 / 3.0))
    else:
        # 1 - alpha_{k+1}/alpha_k, written to keep precision at large k
        decay = -math.expm1(-math.log1p(1.0 / (k + s.k0)) / 3.0)
        beta_k = decay + s.momentum_coef() * s.step_size(k + 1) ** 2
    if not 0.0 < beta_k < 1.0:
        raise ConfigError(f"beta_{k} = {beta_k!r} outside (0, 1); invalid alpha/L/K combination")
    return alpha_k, beta_k


def dsgt_step_size(alpha: float, k: int) -> float:
    return alpha / math.sqrt(k + 1)


def selection_weights(s: Schedule, iterations: int, rule: str = "auto") -> np.ndarray:
    """Probabilities of returning iterate ``tau = k`` for ``k < iterations``.

    ``uniform`` or ``alpha_weighted`` (proportional to ``alpha_k``; the
    constant factor in front of ``alpha_k`` cancels). ``auto`` picks uniform
    for the constant family and alpha-weighted otherwise.
    """
    if rule == "auto":
        rule = "uniform" if s.family == "constant" else "alpha_weighted"
    if rule == "uniform":
        return np.full(iterations, 1.0 / iterations)
    if rule == "alpha_weighted":
        a = np.array([s.step_size(k) for k in range(iterations)])
        return a / a.sum()
    raise ConfigError(f"unknown output selection rule {rule!r}")


def select_output_index(s: Schedule, iterations: int, rule: str, rng: np.random.Generator) -> int:
    if iterations == 1:
        return 0
    return int(rng.choice(iterations, p=selection_weights(s, iterations, rule)))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EstimatorConfig:
    """Choice of ``vtilde`` and batch sizes.

    ``m`` and ``m0`` are sample counts or ``"full"`` for a deterministic pass
    over the whole shard. For ``v1_svrg`` the snapshot is refreshed whenever
    ``k`` is a multiple of ``snapshot_period`` using ``snapshot_batch``
    samples (``"full"`` by default).
    """

    variant: str = "v2"
    m: int | str = 1
    m0: int | str = 1
    snapshot_period: int = 1
    snapshot_batch: int | str = FULL

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown estimator variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("m", "m0", "snapshot_batch"):
            v = getattr(self, name)
            if v != FULL and not (isinstance(v, (int, np.integer)) and v >= 1):
                raise ConfigError(f"{name} must be a positive integer or 'full', got {v!r}")
        if self.snapshot_period < 1:
            raise ConfigError(f"snapshot_period must be >= 1, got {self.snapshot_period}")

    def sigma_hat_sq(self, sigma: float, shard_size: int) -> float:
        """Variance bound of ``vtilde``: ``sigma^2/m`` or ``(3/m + 6/|snapshot|) sigma^2``."""
        m = shard_size if self.m == FULL else self.m
        if self.variant == "v1_svrg":
            b = shard_size if self.snapshot_batch == FULL else self.snapshot_batch
            return (3.0 / m + 6.0 / b) * sigma**2
        return sigma**2 / m


@dataclass(frozen=True)
class RunConfig:
    operator: ChebyshevOperator
    problem: ProblemInstance
    estimator: EstimatorConfig
    schedule: Schedule
    iterations: int
    seed: int = 0
    initial_rounds: int = 1
    selection: str = "auto"
    record_every: int = 1
    x0: np.ndarray | None = None
    init_scale: float = 0.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.initial_rounds < 1:
            raise ConfigError(f"initial_rounds must be >= 1, got {self.initial_rounds}")
        if self.record_every < 1:
            raise ConfigError(f"record_every must be >= 1, got {self.record_every}")
        if self.operator.n_agents != self.problem.n_agents:
            raise ConfigError(
                f"topology has {self.operator.n_agents} agents, problem has {self.problem.n_agents}"
            )
        if self.schedule.family == "constant" and self.schedule.rule == "theory":
            if self.schedule.horizon != self.iterations:
                raise ConfigError("constant schedule horizon must equal the iteration count")
        if self.selection not in ("auto", "uniform", "alpha_weighted"):
            raise ConfigError(f"unknown output selection rule {self.selection!r}")


@dataclass(frozen=True)
class AgentState:
    """Per-agent view of a :class:`RunState`."""

    x: np.ndarray
    d: np.ndarray
    y: np.ndarray
    snapshot_x: np.ndarray | None = None
    snapshot_grad: np.ndarray | None = None


@dataclass
class RunState:
    k: int
    X: np.ndarray
    D: np.ndarray
    Y: np.ndarray
    rngs: list[np.random.Generator]
    tau: int
    samples: np.ndarray
    evals: np.ndarray
    comm: int
    snapshot_x: np.ndarray | None = None
    snapshot_grad: np.ndarray | None = None
    z_tau: np.ndarray | None = None

    def agent(self, i: int) -> AgentState:
        snap_x = None if self.snapshot_x is None else self.snapshot_x[i]
        snap_g = None if self.snapshot_grad is None else self.snapshot_grad[i]
        return AgentState(self.X[i], self.D[i], self.Y[i], snap_x, snap_g)

    def agents(self) -> list[AgentState]:
        return [self.agent(i) for i in range(self.X.shape[0])]


@dataclass
class RunResult:
    trace: list[TraceRecord]
    output_iterate: np.ndarray | None
    state: RunState


# ---------------------------------------------------------------------------
# algorithm


def _draw(p: ProblemInstance, agent: int, m: int | str, rng: np.random.Generator) -> Batch:
    if m == FULL:
        return _problems.full_batch(p, agent)
    return _problems.sample_batch(p, agent, m, rng)


def _draw_all(p: ProblemInstance, m: int | str, rngs: list[np.random.Generator]) -> list[Batch]:
    return [_draw(p, i, m, rngs[i]) for i in range(p.n_agents)]


def _grads(p: ProblemInstance, batches: list[Batch], *points: np.ndarray) -> np.ndarray:
    """Batch gradients of every agent at each ``(N, dim)`` point matrix; shape (N, q, dim).

    Every gradient the optimizer needs passes through here.
    """
    return _problems.batch_gradients(p, batches, np.stack(points, axis=1))


def _check_finite(k: int, **mats: np.ndarray) -> None:
    for name, a in mats.items():
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"iteration {k}: {name} has non-finite entries")
        big = float(np.max(np.abs(a)))
        if big > DIVERGENCE_LIMIT:
            raise DivergenceError(f"iteration {k}: max |{name}| = {big:.3e} exceeds {DIVERGENCE_LIMIT:.0e}")


def initial_point(cfg: RunConfig) -> np.ndarray:
    """Shared starting point: ``cfg.x0`` or ``init_scale * N(0, I)`` from the init stream."""
    if cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, dtype=float)
        if x0.shape != (cfg.problem.dim,):
            raise ConfigError(f"x0 must have shape ({cfg.problem.dim},), got {x0.shape}")
        return x0.copy()
    if cfg.init_scale == 0.0:
        return np.zeros(cfg.problem.dim)
    return cfg.init_scale * named_stream(cfg.seed, INIT_STREAM).standard_normal(cfg.problem.dim)


def _sizes(batches: list[Batch]) -> np.ndarray:
    return np.array([b.size for b in batches], dtype=np.int64)


def _refresh_snapshot(cfg: RunConfig, state: RunState, X: np.ndarray) -> None:
    batches = _draw_all(cfg.problem, cfg.estimator.snapshot_batch, state.rngs)
    state.snapshot_x = X.copy()
    state.snapshot_grad = _grads(cfg.problem, batches, X)[:, 0]
    state.samples += _sizes(batches)
    state.evals += _sizes(batches)


def init(cfg: RunConfig) -> RunState:
    """Initial state: shared ``x0``, ``m0``-sample ``D``, ``Y = W_{T0}(D)``."""
    p, est = cfg.problem, cfg.estimator
    n = p.n_agents
    rngs = agent_streams(cfg.seed, n)
    tau = select_output_index(cfg.schedule, cfg.iterations, cfg.selection, named_stream(cfg.seed, SELECTION_STREAM))
    X = np.tile(initial_point(cfg), (n, 1))
    batches = _draw_all(p, est.m0, rngs)
    D = _grads(p, batches, X)[:, 0]
    init_op = replace(cfg.operator, rounds=cfg.initial_rounds) if cfg.initial_rounds != cfg.operator.rounds else cfg.operator
    state = RunState(
        k=0, X=X, D=D, Y=mix(init_op, D), rngs=rngs, tau=tau,
        samples=_sizes(batches), evals=_sizes(batches), comm=cfg.initial_rounds,
    )
    if est.variant == "v1_svrg":
        _refresh_snapshot(cfg, state, X)
    _check_finite(0, D=D, Y=state.Y)
    return state


def estimate_vtilde(
    variant: str,
    x_plus: np.ndarray,
    v: np.ndarray,
    cfg: RunConfig,
    state: RunState,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unbiased estimates of ``grad f_i(x_i+)`` for all agents at once (row ``i`` is agent ``i``).

    Returns ``(vtilde, samples drawn, gradient evaluations)`` with per-agent
    counts. ``v2`` reuses ``v``; the ``v1`` variants draw a fresh batch from
    each agent's own stream.
    """
    n = x_plus.shape[0]
    if variant == "v2":
        zero = np.zeros(n, dtype=np.int64)
        return v, zero, zero
    if variant not in VARIANTS:
        raise ConfigError(f"unknown estimator variant {variant!r}")
    p = cfg.problem
    batches = _draw_all(p, cfg.estimator.m, state.rngs)
    sizes = _sizes(batches)
    if variant == "v1_sg":
        return _grads(p, batches, x_plus)[:, 0], sizes, sizes
    if state.snapshot_x is None:
        raise RuntimeError("v1_svrg estimator used before a snapshot was taken")
    g = _grads(p, batches, x_plus, state.snapshot_x)
    # difference first: exact snapshot_grad when x_plus == snapshot_x
    return state.snapshot_grad + (g[:, 0] - g[:, 1]), sizes, 2 * sizes


def step(state: RunState, cfg: RunConfig) -> RunState:
    """Advance ``state`` (at iteration ``k``) by one synchronous round.

    Returns a new state; the RNG generators are shared and advanced. Each
    agent draws, in order, its snapshot batch (when due), ``B`` and ``B~``.
    """
    k = state.k
    if k >= cfg.iterations:
        raise ConfigError(f"iteration {k} is past the horizon {cfg.iterations}")
    p, est, op = cfg.problem, cfg.estimator, cfg.operator
    alpha_k, beta_k = schedule_values(cfg.schedule, k)

    Z = mix(op, state.X)
    new = RunState(
        k=k + 1, X=prox_step(Z, state.Y, alpha_k, p.regularizer), D=state.D,
        Y=state.Y, rngs=state.rngs, tau=state.tau, samples=state.samples.copy(),
        evals=state.evals.copy(), comm=state.comm + op.rounds,
        snapshot_x=state.snapshot_x, snapshot_grad=state.snapshot_grad,
        z_tau=Z.copy() if k == state.tau else state.z_tau,
    )
    if est.variant == "v1_svrg" and k > 0 and k % est.snapshot_period == 0:
        # snapshot at x^(k), the most recent multiple of the period
        _refresh_snapshot(cfg, new, state.X)
    batches = _draw_all(p, est.m, state.rngs)
    vu = _grads(p, batches, new.X, state.X)
    V, U = vu[:, 0], vu[:, 1]
    Vt, extra_samples, extra_evals = estimate_vtilde(est.variant, new.X, V, cfg, new)
    new.D = (1.0 - beta_k) * (state.D + V - U) + beta_k * Vt
    sizes = _sizes(batches)
    new.samples += sizes + extra_samples
    new.evals += 2 * sizes + extra_evals
    new.Y = mix(op, state.Y + new.D - state.D)
    new.comm += op.rounds
    _check_finite(k + 1, X=new.X, D=new.D, Y=new.Y)
    return new


def _record(state: RunState, cfg: RunConfig, eta: float) -> TraceRecord:
    Z = mix(cfg.operator, state.X)
    return make_record(
        state.k, state.X, Z, state.Y, state.D, cfg.problem, eta,
        int(state.samples.max()), int(state.evals.max()), state.comm,
    )


def _drive(
    cfg: RunConfig,
    state: RunState,
    advance: Callable[[RunState, RunConfig], RunState],
    eta: Callable[[int], float],
    stop: int,
    fresh: bool,
    callback: Callable[[RunState], None] | None,
) -> tuple[list[TraceRecord], RunState]:
    if not 0 <= stop <= cfg.iterations:
        raise ConfigError(f"stop_at must lie in [0, {cfg.iterations}], got {stop}")
    if state.k > stop:
        raise ConfigError(f"state is at iteration {state.k}, past stop_at={stop}")
    trace: list[TraceRecord] = []
    if fresh:
        if callback:
            callback(state)
        trace.append(_record(state, cfg, eta(0)))
    try:
        while state.k < stop:
            state = advance(state, cfg)
            if callback:
                callback(state)
            if state.k % cfg.record_every == 0 or state.k == cfg.iterations:
                trace.append(_record(state, cfg, eta(state.k)))
    except DivergenceError as exc:
        # keep what was recorded so a sweep can report it
        exc.partial = RunResult(trace, None, state)
        raise
    return trace, state


def run(
    cfg: RunConfig,
    *,
    state: RunState | None = None,
    stop_at: int | None = None,
    callback: Callable[[RunState], None] | None = None,
) -> RunResult:
    """Run from scratch (or from ``state``) up to iteration ``stop_at`` (default K).

    The trace holds a record at every multiple of ``record_every`` and at
    ``K``; a fresh run also records ``k = 0``. ``callback`` sees the initial
    state (fresh runs) and every new state. The output iterate is
    ``Z^(tau)``, available once ``tau`` has been passed.
    """
    fresh = state is None
    trace, state = _drive(
        cfg, init(cfg) if fresh else state, step, cfg.schedule.step_size,
        cfg.iterations if stop_at is None else stop_at, fresh, callback,
    )
    return RunResult(trace, state.z_tau, state)


# ---------------------------------------------------------------------------
# baseline


def dsgt_init(cfg: RunConfig) -> RunState:
    p, est = cfg.problem, cfg.estimator
    rngs = agent_streams(cfg.seed, p.n_agents)
    X = np.tile(initial_point(cfg), (p.n_agents, 1))
    batches = _draw_all(p, est.m0, rngs)
    G = _grads(p, batches, X)[:, 0]
    return RunState(k=0, X=X, D=G, Y=G.copy(), rngs=rngs, tau=-1,
                    samples=_sizes(batches), evals=_sizes(batches), comm=0)


def dsgt_step(state: RunState, cfg: RunConfig) -> RunState:
    """``X+ = W_T(X) - alpha_k Y``; ``Y+ = W_T(Y + G+ - G)``; no prox."""
    p, est, op = cfg.problem, cfg.estimator, cfg.operator
    k = state.k
    X = mix(op, state.X) - dsgt_step_size(cfg.schedule.alpha, k) * state.Y
    batches = _draw_all(p, est.m, state.rngs)
    G = _grads(p, batches, X)[:, 0]
    Y = mix(op, state.Y + G - state.D)
    _check_finite(k + 1, X=X, G=G, Y=Y)
    samples = state.samples + _sizes(batches)
    return RunState(k=k + 1, X=X, D=G, Y=Y, rngs=state.rngs, tau=-1, samples=samples,
                    evals=samples.copy(), comm=state.comm + 2 * op.rounds)


def run_dsgt(
    cfg: RunConfig,
    *,
    state: RunState | None = None,
    stop_at: int | None = None,
    callback: Callable[[RunState], None] | None = None,
) -> RunResult:
    """Gradient-tracking SGD with ``alpha_k = alpha / sqrt(k + 1)``.

    Uses ``cfg.schedule.alpha`` as the base step, ``cfg.estimator.m`` and
    ``m0`` as batch sizes and ignores the estimator variant. The regulariser
    is not applied by the iteration; metrics still report the composite
    objective. The output iterate is the final ``X``.
    """
    fresh = state is None
    trace, state = _drive(
        cfg, dsgt_init(cfg) if fresh else state, dsgt_step,
        lambda k: dsgt_step_size(cfg.schedule.alpha, k),
        cfg.iterations if stop_at is None else stop_at, fresh, callback,
    )
    return RunResult(trace, state.X.copy(), state)


# ---------------------------------------------------------------------------
# diagnostics


def initial_lyapunov(state: RunState, cfg: RunConfig) -> float:
    """Value of the merit function at ``k = 0`` that the convergence bounds start from.

    Reporting only. Constant family:
    ``phi(xbar) + g1 ||Y_perp||^2 + g2 ||X_perp||^2 + g3 ||R||^2 + g4 ||rbar||^2``
    with ``g1 = 1/(N L (1-rt))``, ``g2 = 16 K^(1/3) / (N (1-rt) alpha)``,
    ``g3 = K^(1/3) / (48 N L^2 alpha)``, ``g4 = N K^(1/3) / (48 L^2 alpha)``.
    Diminishing family: the same shape with ``k0`` in place of ``K``,
    ``g3 = k0^(1/3) / (24 N L^2 alpha)`` and no ``rbar`` term.
    ``R = D - grad F(X)``.
    """
    s, p = cfg.schedule, cfg.problem
    n, L, rt, a = p.n_agents, p.smoothness_L, cfg.operator.rho_tilde, s.alpha
    X, Y, D = state.X, state.Y, state.D
    R = D - _problems.local_gradients(p, X)
    xbar = X.mean(axis=0)
    x_perp = float(((X - xbar) ** 2).sum())
    y_perp = float(((Y - Y.mean(axis=0)) ** 2).sum())
    r_sq = float((R**2).sum())
    rbar_sq = float((R.mean(axis=0) ** 2).sum())
    base = _problems.objective(p, xbar) + y_perp / (n * L * (1.0 - rt))
    if s.family == "constant":
        c = (s.horizon or cfg.iterations) ** (1.0 / 3.0)
        return (base + 16 * c / (n * (1 - rt) * a) * x_perp + c / (48 * n * L**2 * a) * r_sq
                + n * c / (48 * L**2 * a) * rbar_sq)
    c = s.k0 ** (1.0 / 3.0)
    return base + 16 * c / (n * (1 - rt) * a) * x_perp + c / (24 * n * L**2 * a) * r_sq


# ---------------------------------------------------------------------------
# checkpoints


def _arr(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def checkpoint_dict(state: RunState, problem: ProblemInstance, meta: dict | None = None) -> dict:
    """Structured-text form of a run state. Floats round-trip exactly through JSON."""
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "problem_digest": problem.digest(),
        "meta": meta or {},
        "k": state.k,
        "tau": state.tau,
        "comm": state.comm,
        "samples": state.samples.tolist(),
        "evals": state.evals.tolist(),
        "X": _arr(state.X),
        "D": _arr(state.D),
        "Y": _arr(state.Y),
        "snapshot_x": _arr(state.snapshot_x),
        "snapshot_grad": _arr(state.snapshot_grad),
        "z_tau": _arr(state.z_tau),
        "rng_states": [g.bit_generator.state for g in state.rngs],
    }


def save_checkpoint(path: str | Path, state: RunState, problem: ProblemInstance, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(state, problem, meta), indent=1))


def load_checkpoint(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    return doc


def state_from_checkpoint(doc: dict, problem: ProblemInstance) -> RunState:
    if doc["problem_digest"] != problem.digest():
        raise CheckpointError("checkpoint was written for a different problem instance")
    try:
        rngs = []
        for st in doc["rng_states"]:
            bg = np.random.PCG64()
            bg.state = st
            rngs.append(np.random.Generator(bg))

        def mat(key):
            v = doc[key]
            return None if v is None else np.array(v, dtype=float)

        state = RunState(
            k=int(doc["k"]), X=mat("X"), D=mat("D"), Y=mat("Y"), rngs=rngs,
            tau=int(doc["tau"]), samples=np.array(doc["samples"], dtype=np.int64),
            evals=np.array(doc["evals"], dtype=np.int64), comm=int(doc["comm"]),
            snapshot_x=mat("snapshot_x"), snapshot_grad=mat("snapshot_grad"), z_tau=mat("z_tau"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupted checkpoint: {exc}") from exc
    n, dim = problem.n_agents, problem.dim
    for name in ("X", "D", "Y"):
        if getattr(state, name).shape != (n, dim):
            raise CheckpointError(f"corrupted checkpoint: {name} has shape {getattr(state, name).shape}")
    if len(rngs) != n:
        raise CheckpointError("corrupted checkpoint: wrong number of RNG streams")
    return state
