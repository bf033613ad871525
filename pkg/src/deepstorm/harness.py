"""Experiment runner: JSON configs, seeded sweeps, CSV traces and summaries.

Config schema (JSON object; unknown keys are rejected)::

    {
      "name": "ring8-logistic",
      "iterations": 5000,                 # K, required
      "n_seeds": 5, "seed": 0,            # seeds seed, seed+1, ...
      "record_every": 10,
      "output_dir": "runs/ring8",
      "stop_at": null,                    # stop early and checkpoint (resume later)
      "init_scale": 0.0,
      "topology": {"graph": "ring", "n_agents": 8, "seed": 0, "density": 0.4,
                   "mixing": "auto", "matrix_file": null,
                   "rounds": 1, "initial_rounds": "auto"},
      "problem": {"kind": "logistic_l1", "n_samples": 4000, "dim": 50,
                  "sparsity": 0.2, "lam": 1e-4, "feature_scale": 0.1, "seed": 0},
      "methods": [
        {"name": "v2", "algorithm": "deepstorm",
         "estimator": {"variant": "v2", "m": 16, "m0": 16},
         "schedule": {"family": "diminishing", "alpha": 300, "rule": "practical",
                      "k0": "auto", "beta_coef": "auto"}},
        {"name": "dsgt", "algorithm": "dsgt",
         "estimator": {"m": 16, "m0": 16}, "schedule": {"alpha": 300}}
      ]
    }

``"auto"`` values are resolved against the built topology and problem:
``rounds`` -> ``ceil(2/sqrt(1-rho))``, ``initial_rounds`` ->
``ceil(-2 ln(1-rho_tilde)/sqrt(1-rho))``, ``k0`` -> ``ceil(2/(1-rho_tilde^3))``
(``"network_independent"`` gives ``ceil(2/(1-rho_tilde)^6)``), ``m0`` ->
``ceil((N K)^(1/3))``, ``alpha`` (theory rule) -> the largest admissible value
capped by the sample-complexity recipe, ``beta_coef`` (practical rule) -> half
of ``1/(alpha_0 alpha_1)``.

Environment overrides: ``DEEPSTORM_OUTPUT_DIR`` replaces ``output_dir`` and
``DEEPSTORM_THREADS`` sets how many seeds run concurrently.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import optimizer as opt
from . import problems as pb
from . import topology as tp
from .errors import CheckpointError, ConfigError, DivergenceError
from .metrics import TraceRecord, read_trace_csv, write_trace_csv

log = logging.getLogger(__name__)

AUTO = "auto"
ENV_OUTPUT_DIR = "DEEPSTORM_OUTPUT_DIR"
ENV_THREADS = "DEEPSTORM_THREADS"
SUMMARY_METRICS = [c for c in TraceRecord.columns() if c not in ("k", "samples_used", "grad_evals", "comm_rounds")]


@dataclass(frozen=True)
class TopologySpec:
    graph: str
    n_agents: int
    seed: int = 0
    density: float = 0.4
    mixing: str = AUTO
    matrix_file: str | None = None
    rounds: int | str = 1
    initial_rounds: int | str = AUTO


@dataclass(frozen=True)
class ProblemSpec:
    kind: str
    seed: int = 0
    lam: float | None = None
    dim: int | None = None
    # quadratic
    heterogeneity: float = 1.0
    samples_per_agent: int = 32
    noise: float = 1.0
    # logistic_l1
    n_samples: int | None = None
    sparsity: float = 0.2
    feature_scale: float = 1.0
    data_file: str | None = None


@dataclass(frozen=True)
class EstimatorSpec:
    variant: str = "v2"
    m: int | str = 1
    m0: int | str = 1
    snapshot_period: int = 1
    snapshot_batch: int | str = opt.FULL


@dataclass(frozen=True)
class ScheduleSpec:
    alpha: float | str
    family: str = "diminishing"
    rule: str = "theory"
    k0: int | str = AUTO
    beta_coef: float | str | None = None


@dataclass(frozen=True)
class MethodSpec:
    name: str
    schedule: ScheduleSpec
    algorithm: str = "deepstorm"
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    selection: str = AUTO


@dataclass(frozen=True)
class ExperimentSpec:
    iterations: int
    topology: TopologySpec
    problem: ProblemSpec
    methods: tuple[MethodSpec, ...]
    name: str = "experiment"
    n_seeds: int = 1
    seed: int = 0
    record_every: int = 1
    output_dir: str = "runs"
    stop_at: int | None = None
    init_scale: float = 0.0

    @property
    def seeds(self) -> list[int]:
        return [self.seed + j for j in range(self.n_seeds)]

    def method(self, name: str) -> MethodSpec:
        for m in self.methods:
            if m.name == name:
                return m
        raise ConfigError(f"no method named {name!r}")


# ---------------------------------------------------------------------------
# parsing


_NESTED = {
    "topology": TopologySpec,
    "problem": ProblemSpec,
    "estimator": EstimatorSpec,
    "schedule": ScheduleSpec,
}


def _from_dict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    kwargs = {}
    for name, f in known.items():
        if name not in d:
            if f.default is MISSING and f.default_factory is MISSING:
                raise ConfigError(f"{where}: missing required key {name!r}")
            continue
        v = d[name]
        sub = f"{where}.{name}" if where else name
        if name in _NESTED:
            v = _from_dict(_NESTED[name], v, sub)
        elif name == "methods":
            if not isinstance(v, list) or not v:
                raise ConfigError(f"{sub}: expected a non-empty list")
            v = tuple(_from_dict(MethodSpec, m, f"{sub}[{j}]") for j, m in enumerate(v))
        kwargs[name] = v
    return cls(**kwargs)


def spec_from_dict(d: dict) -> ExperimentSpec:
    try:
        spec = _from_dict(ExperimentSpec, d, "config")
        validate(spec)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from exc
    return spec


def parse_config(path: str | Path) -> ExperimentSpec:
    """Read and fully validate a JSON experiment config."""
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    return spec_from_dict(d)


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    d["methods"] = [asdict(m) for m in spec.methods]
    return d


def serialize(spec: ExperimentSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2, sort_keys=True)


def _need_int(v, name: str, lo: int = 1, allow: tuple = ()) -> None:
    if v in allow:
        return
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        extra = f" or one of {list(allow)}" if allow else ""
        raise ConfigError(f"{name} must be an integer >= {lo}{extra}, got {v!r}")


def validate(spec: ExperimentSpec) -> None:
    """Check scalar fields, then build every run config so schedule bounds are checked eagerly."""
    _need_int(spec.iterations, "iterations")
    _need_int(spec.n_seeds, "n_seeds")
    _need_int(spec.record_every, "record_every")
    _need_int(spec.seed, "seed", lo=0)
    if spec.stop_at is not None:
        _need_int(spec.stop_at, "stop_at", lo=0)
        if spec.stop_at > spec.iterations:
            raise ConfigError(f"stop_at = {spec.stop_at} exceeds iterations = {spec.iterations}")
    names = [m.name for m in spec.methods]
    if len(set(names)) != len(names):
        raise ConfigError(f"method names must be unique, got {names}")
    for m in spec.methods:
        if m.algorithm not in ("deepstorm", "dsgt"):
            raise ConfigError(f"method {m.name!r}: unknown algorithm {m.algorithm!r}")
    env = build_environment(spec)
    for m in spec.methods:
        try:
            run_config(spec, m, env, spec.seed)
        except ConfigError as exc:
            raise ConfigError(f"method {m.name!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# building


@dataclass(frozen=True)
class Environment:
    """Built topology and problem shared by every method and seed."""

    operator: tp.ChebyshevOperator
    initial_rounds: int
    problem: pb.ProblemInstance


def build_operator(t: TopologySpec) -> tuple[tp.ChebyshevOperator, int]:
    g = tp.build_graph(t.graph, t.n_agents, seed=t.seed, density=t.density)
    if t.matrix_file is not None:
        w = tp.MixingMatrix(g, tp.load_matrix(t.matrix_file))
    else:
        w = tp.make_mixing(g, t.mixing)
    _need_int(t.rounds, "topology.rounds", allow=(AUTO,))
    _need_int(t.initial_rounds, "topology.initial_rounds", allow=(AUTO,))
    rounds = tp.chebyshev_rounds_for_target(w.rho) if t.rounds == AUTO else t.rounds
    op = tp.ChebyshevOperator(w, rounds)
    t0 = tp.initial_rounds(w.rho, op.rho_tilde) if t.initial_rounds == AUTO else t.initial_rounds
    return op, t0


def build_problem(p: ProblemSpec, n_agents: int) -> pb.ProblemInstance:
    if p.kind == "quadratic":
        if p.dim is None:
            raise ConfigError("problem.dim is required for the quadratic kind")
        return pb.make_quadratic(
            n_agents, p.dim, p.seed, heterogeneity=p.heterogeneity,
            samples_per_agent=p.samples_per_agent, noise=p.noise, lam=p.lam or 0.0,
        )
    if p.kind == "logistic_l1":
        lam = 1e-4 if p.lam is None else p.lam
        if p.data_file is not None:
            a, b = pb.load_dataset(p.data_file)
            return pb.logistic_from_data(a, b, n_agents, p.seed, lam=lam)
        if p.dim is None or p.n_samples is None:
            raise ConfigError("problem.dim and problem.n_samples are required for synthetic logistic_l1")
        if p.n_samples < n_agents:
            raise ConfigError(f"n_samples = {p.n_samples} is below n_agents = {n_agents}")
        return pb.make_logistic_l1(
            n_agents, p.n_samples, p.dim, p.sparsity, p.seed, lam=lam, feature_scale=p.feature_scale,
        )
    raise ConfigError(f"unknown problem kind {p.kind!r}; expected one of {pb.PROBLEM_KINDS}")


def build_environment(spec: ExperimentSpec) -> Environment:
    op, t0 = build_operator(spec.topology)
    return Environment(op, t0, build_problem(spec.problem, spec.topology.n_agents))


def _resolve_alpha(s: ScheduleSpec, L: float, n: int, rho_tilde: float, scale: float) -> float:
    if s.alpha != AUTO:
        if isinstance(s.alpha, bool) or not isinstance(s.alpha, (int, float)):
            raise ConfigError(f"alpha must be a positive number or 'auto', got {s.alpha!r}")
        return float(s.alpha)
    if s.rule != "theory":
        raise ConfigError("alpha = 'auto' is only defined for the theory rule")
    recipe = (n ** (2.0 / 3.0) if s.family == "constant" else 1.0) / (64.0 * L)
    return min(recipe, *opt.alpha_bound(L, rho_tilde, scale))


def build_schedule(s: ScheduleSpec, env: Environment, iterations: int) -> opt.Schedule:
    p, rt = env.problem, env.operator.rho_tilde
    L, n = p.smoothness_L, p.n_agents
    k0 = None
    if s.family == "diminishing":
        if s.k0 == AUTO:
            k0 = opt.k0_threshold(rt)
        elif s.k0 == "network_independent":
            k0 = opt.k0_network_independent(rt)
        else:
            _need_int(s.k0, "k0", allow=(AUTO, "network_independent"))
            k0 = s.k0
    scale = iterations if s.family == "constant" else k0
    alpha = _resolve_alpha(s, L, n, rt, scale)
    beta = s.beta_coef
    if beta == AUTO:
        if s.rule != "practical" or k0 is None:
            raise ConfigError("beta_coef = 'auto' is only defined for the practical rule")
        beta = 0.5 * (k0 * (k0 + 1)) ** (1.0 / 3.0) / alpha**2
    return opt.Schedule(
        s.family, alpha, L=L, N=n, rho_tilde=rt,
        horizon=iterations if s.family == "constant" else None,
        k0=k0, rule=s.rule, beta_coef=beta,
    )


def run_config(spec: ExperimentSpec, m: MethodSpec, env: Environment, seed: int) -> opt.RunConfig:
    e = m.estimator
    m0 = opt.recommended_m0(env.problem.n_agents, spec.iterations) if e.m0 == AUTO else e.m0
    est = opt.EstimatorConfig(e.variant, e.m, m0, e.snapshot_period, e.snapshot_batch)
    if m.algorithm == "dsgt":
        if not (isinstance(m.schedule.alpha, (int, float)) and m.schedule.alpha > 0):
            raise ConfigError(f"dsgt needs a positive numeric alpha, got {m.schedule.alpha!r}")
        # the schedule only carries alpha for the baseline
        sched = opt.Schedule("constant", float(m.schedule.alpha), rule="manual", beta_coef=1.0)
    else:
        sched = build_schedule(m.schedule, env, spec.iterations)
    return opt.RunConfig(
        env.operator, env.problem, est, sched, spec.iterations, seed=seed,
        initial_rounds=env.initial_rounds, selection=m.selection,
        record_every=spec.record_every, init_scale=spec.init_scale,
    )


# ---------------------------------------------------------------------------
# running


def output_dir(spec: ExperimentSpec) -> Path:
    return Path(os.environ.get(ENV_OUTPUT_DIR) or spec.output_dir)


def thread_count() -> int:
    raw = os.environ.get(ENV_THREADS)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_THREADS} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{ENV_THREADS} must be a positive integer, got {raw!r}")
    return n


def trace_path(out: Path, method: str, seed: int) -> Path:
    return out / f"trace_{method}_seed{seed}.csv"


def checkpoint_path(out: Path, method: str, seed: int) -> Path:
    return out / f"checkpoint_{method}_seed{seed}.json"


@dataclass
class SeedOutcome:
    method: str
    seed: int
    trace: list[TraceRecord]
    status: str = "ok"
    message: str = ""


def _execute(cfg: opt.RunConfig, algorithm: str, *, state=None, stop_at=None) -> opt.RunResult:
    runner = opt.run_dsgt if algorithm == "dsgt" else opt.run
    return runner(cfg, state=state, stop_at=stop_at)


def _run_one(spec: ExperimentSpec, m: MethodSpec, env: Environment, seed: int, out: Path) -> SeedOutcome:
    cfg = run_config(spec, m, env, seed)
    try:
        res = _execute(cfg, m.algorithm, stop_at=spec.stop_at)
    except DivergenceError as exc:
        log.warning("%s seed %d diverged: %s", m.name, seed, exc)
        trace = exc.partial.trace if hasattr(exc, "partial") else []
        write_trace_csv(trace_path(out, m.name, seed), trace)
        return SeedOutcome(m.name, seed, trace, "diverged", str(exc))
    write_trace_csv(trace_path(out, m.name, seed), res.trace)
    meta = {"config": spec_to_dict(spec), "method": m.name, "seed": seed}
    opt.save_checkpoint(checkpoint_path(out, m.name, seed), res.state, env.problem, meta)
    return SeedOutcome(m.name, seed, res.trace)


def run_experiment(spec: ExperimentSpec, out: str | Path | None = None) -> dict[str, Path]:
    """Run every method for every seed and write traces and summaries.

    Writes ``trace_<method>_seed<s>.csv`` and a checkpoint per run, then
    ``status.csv``, ``summary_iterations.csv`` (mean/std across seeds at each
    recorded iteration), ``summary_samples.csv`` (the same statistics keyed
    by samples used and data passes) and ``comparison.csv`` (each method at
    the largest sample budget that every method reached). Diverged seeds are
    reported in ``status.csv`` and left out of the statistics.
    """
    out = Path(out) if out is not None else output_dir(spec)
    out.mkdir(parents=True, exist_ok=True)
    env = build_environment(spec)
    (out / "config.json").write_text(serialize(spec) + "\n")
    jobs = [(m, s) for m in spec.methods for s in spec.seeds]
    workers = min(thread_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(lambda j: _run_one(spec, j[0], env, j[1], out), jobs))
    else:
        outcomes = [_run_one(spec, m, env, s, out) for m, s in jobs]
    return write_summaries(spec, env.problem, outcomes, out)


def _stats(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std())


def _aligned(spec: ExperimentSpec, outcomes: list[SeedOutcome]) -> dict[str, list[dict]]:
    """Per method, one row per recorded iteration with across-seed mean/std."""
    rows: dict[str, list[dict]] = {}
    for m in spec.methods:
        ok = [o for o in outcomes if o.method == m.name and o.status == "ok"]
        by_k: dict[int, list[TraceRecord]] = {}
        for o in ok:
            for r in o.trace:
                by_k.setdefault(r.k, []).append(r)
        rows[m.name] = []
        for k in sorted(by_k):
            recs = by_k[k]
            row = {
                "method": m.name, "k": k, "n_seeds": len(recs),
                "samples_used": max(r.samples_used for r in recs),
                "grad_evals": max(r.grad_evals for r in recs),
                "comm_rounds": max(r.comm_rounds for r in recs),
            }
            for c in SUMMARY_METRICS:
                row[f"{c}_mean"], row[f"{c}_std"] = _stats([getattr(r, c) for r in recs])
            rows[m.name].append(row)
    return rows


def _write_rows(path: Path, rows: list[dict], cols: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def write_summaries(
    spec: ExperimentSpec, problem: pb.ProblemInstance, outcomes: list[SeedOutcome], out: Path
) -> dict[str, Path]:
    stat_cols = [f"{c}_{s}" for c in SUMMARY_METRICS for s in ("mean", "std")]
    rows = _aligned(spec, outcomes)
    paths = {
        "status": out / "status.csv",
        "iterations": out / "summary_iterations.csv",
        "samples": out / "summary_samples.csv",
        "comparison": out / "comparison.csv",
    }
    _write_rows(
        paths["status"],
        [{"method": o.method, "seed": o.seed, "status": o.status, "message": o.message} for o in outcomes],
        ["method", "seed", "status", "message"],
    )
    base = ["method", "k", "n_seeds", "samples_used", "grad_evals", "comm_rounds"]
    flat = [r for m in spec.methods for r in rows[m.name]]
    _write_rows(paths["iterations"], flat, base + stat_cols)

    shard = float(np.mean(problem.shard_sizes))
    by_samples = sorted(flat, key=lambda r: (r["samples_used"], r["method"], r["k"]))
    for r in by_samples:
        r["data_passes"] = r["samples_used"] / shard
    _write_rows(
        paths["samples"], by_samples,
        ["samples_used", "data_passes", "method", "k", "n_seeds", "grad_evals", "comm_rounds"] + stat_cols,
    )

    finals = [rows[m.name][-1]["samples_used"] for m in spec.methods if rows[m.name]]
    budget = min(finals) if finals else 0
    comp = []
    for m in spec.methods:
        eligible = [r for r in rows[m.name] if r["samples_used"] <= budget]
        if eligible:
            comp.append({**eligible[-1], "budget": budget})
    _write_rows(paths["comparison"], comp, ["method", "budget"] + base[1:] + stat_cols)
    return paths


# ---------------------------------------------------------------------------
# resume


def resume(checkpoint: str | Path, extra_iters: int, out: str | Path | None = None) -> list[TraceRecord]:
    """Continue a checkpointed run by ``extra_iters`` iterations.

    The config stored in the checkpoint rebuilds the problem, whose content
    hash must match. The continued trace is appended to the run's trace CSV
    and a new checkpoint replaces the old one. Returns the new records.
    """
    _need_int(extra_iters, "extra_iters", lo=0)
    checkpoint = Path(checkpoint)
    doc = opt.load_checkpoint(checkpoint)
    meta = doc.get("meta") or {}
    try:
        spec = _from_dict(ExperimentSpec, meta["config"], "config")
        method = spec.method(meta["method"])
        seed = int(meta["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {checkpoint} carries no usable run config: {exc}") from exc
    env = build_environment(spec)
    state = opt.state_from_checkpoint(doc, env.problem)
    if extra_iters == 0:
        return []
    target = state.k + extra_iters
    if target > spec.iterations:
        raise ConfigError(
            f"cannot resume {extra_iters} iterations from k = {state.k}: horizon is {spec.iterations}"
        )
    cfg = run_config(spec, method, env, seed)
    res = _execute(cfg, method.algorithm, state=state, stop_at=target)
    out = Path(out) if out is not None else checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    tp_ = trace_path(out, method.name, seed)
    previous = read_trace_csv(tp_) if tp_.exists() else []
    write_trace_csv(tp_, previous + res.trace)
    meta = {"config": spec_to_dict(spec), "method": method.name, "seed": seed}
    opt.save_checkpoint(checkpoint_path(out, method.name, seed), res.state, env.problem, meta)
    return res.trace
