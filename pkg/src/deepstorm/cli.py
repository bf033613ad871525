"""Command-line entry point.

Exit codes: 0 success, 1 other library error, 2 invalid config or topology,
3 divergence (any seed in a sweep), 4 bad checkpoint, 5 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from . import harness
from . import optimizer as opt
from . import topology as tp
from .errors import ConfigError, DeepstormError, TopologyError

EXIT_IO = 5

_GRAPH_ALIASES = {"random": "random_connected"}


def parse_graph_spec(text: str) -> tuple[tp.Graph, str]:
    """``kind:n`` or ``random:n[:density[:seed]]``."""
    parts = text.split(":")
    kind = _GRAPH_ALIASES.get(parts[0], parts[0])
    if len(parts) < 2:
        raise TopologyError(f"graph spec {text!r} needs a size, e.g. ring:8")
    try:
        n = int(parts[1])
        density = float(parts[2]) if len(parts) > 2 else 0.4
        seed = int(parts[3]) if len(parts) > 3 else 0
    except ValueError as exc:
        raise TopologyError(f"cannot parse graph spec {text!r}: {exc}") from exc
    if len(parts) > 4 or (len(parts) > 2 and kind != "random_connected"):
        raise TopologyError(f"graph spec {text!r}: only random graphs take density and seed")
    return tp.build_graph(kind, n, seed=seed, density=density), kind


def cmd_spectral(args) -> int:
    g, _ = parse_graph_spec(args.graph)
    w = tp.make_mixing(g, args.mixing)
    t_rec = tp.chebyshev_rounds_for_target(w.rho)
    print(f"graph        {args.graph} ({g.n_agents} agents, {len(g.edges)} edges)")
    print(f"rho          {w.rho:.10g}")
    print(f"recommended  T = {t_rec}")
    print(f"{'T':>3} {'rho_tilde':>14} {'bound':>14} {'T0':>4}")
    for t in range(1, max(args.max_rounds, t_rec) + 1):
        op = tp.ChebyshevOperator(w, t)
        print(f"{t:>3} {op.rho_tilde:>14.8g} {tp.chebyshev_bound(w.rho, t):>14.8g} "
              f"{tp.initial_rounds(w.rho, op.rho_tilde):>4}")
    return 0


def cmd_validate(args) -> int:
    spec = harness.parse_config(args.config)
    env = harness.build_environment(spec)
    op, p = env.operator, env.problem
    print(f"config       {args.config}: ok")
    print(f"topology     rho = {op.base.rho:.6g}, T = {op.rounds}, rho_tilde = {op.rho_tilde:.6g}, "
          f"T0 = {env.initial_rounds}")
    print(f"problem      {p.kind}, N = {p.n_agents}, dim = {p.dim}, L = {p.smoothness_L:.6g}, "
          f"sigma = {p.noise_sigma:.6g}")
    for m in spec.methods:
        cfg = harness.run_config(spec, m, env, spec.seed)
        s = cfg.schedule
        if m.algorithm == "dsgt":
            print(f"method       {m.name}: dsgt, alpha = {s.alpha:.6g}")
            continue
        a0, b0 = opt.schedule_values(s, 0)
        k0 = f", k0 = {s.k0}" if s.k0 is not None else ""
        print(f"method       {m.name}: {cfg.estimator.variant}, {s.family}/{s.rule}{k0}, "
              f"alpha = {s.alpha:.6g}, alpha_0 = {a0:.6g}, beta_0 = {b0:.6g}, m0 = {cfg.estimator.m0}")
    return 0


def cmd_run(args) -> int:
    if args.threads is not None:
        os.environ[harness.ENV_THREADS] = str(args.threads)
    spec = harness.parse_config(args.config)
    paths = harness.run_experiment(spec, args.out)
    with open(paths["status"], newline="") as fh:
        bad = [r for r in csv.DictReader(fh) if r["status"] != "ok"]
    for r in bad:
        print(f"{r['method']} seed {r['seed']}: {r['status']}: {r['message']}", file=sys.stderr)
    print(f"wrote {paths['iterations'].parent}")
    return 3 if bad else 0


def cmd_resume(args) -> int:
    recs = harness.resume(args.checkpoint, args.iters, args.out)
    if recs:
        last = recs[-1]
        print(f"resumed to k = {last.k}: stationarity {last.stationarity_exp:.6g}, consensus {last.consensus:.6g}")
    else:
        print("nothing to do")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepstorm", description="Decentralized proximal STORM simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides config and environment)")
    p.add_argument("--threads", type=int, help="seeds to run concurrently")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue a checkpointed run")
    p.add_argument("checkpoint")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--out", help="output directory (default: next to the checkpoint)")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("validate", help="check a config and print derived constants")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("spectral", help="spectral data of a graph, e.g. ring:8 or random:8:0.4:1")
    p.add_argument("graph")
    p.add_argument("--mixing", default="auto", choices=["auto", "laplacian", "uniform_ring"])
    p.add_argument("--max-rounds", type=int, default=6)
    p.set_defaults(func=cmd_spectral)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DeepstormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
