"""Stationarity, consensus and sparsity measures over iterate matrices.

An iterate matrix ``X`` has one row per agent.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .problems import ProblemInstance, accuracy, global_gradient, objective
from .proximal import prox, prox_grad_map


def consensus_error(X: np.ndarray) -> float:
    """``||X_perp||_F^2``: squared distance of the rows from their average."""
    X = np.asarray(X, dtype=float)
    return float(((X - X.mean(axis=0)) ** 2).sum())


def stationarity_def2(X: np.ndarray, problem: ProblemInstance, eta: float) -> float:
    """Mean squared prox-gradient norm at each row plus ``L^2/N ||X_perp||^2``.

    Uses the exact global gradient ``grad f = (1/N) sum_j grad f_j`` at every
    row.
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    pg = prox_grad_map(X, global_gradient(problem, X), eta, problem.regularizer)
    return float((pg**2).sum(axis=1).mean()) + problem.smoothness_L**2 / n * consensus_error(X)


def stationarity_experiment(X: np.ndarray, problem: ProblemInstance) -> float:
    """``||xbar - prox_r(xbar - grad f(xbar))||^2 + sum_i ||x_i - xbar||^2``."""
    X = np.asarray(X, dtype=float)
    xbar = X.mean(axis=0)
    step = xbar - prox(problem.regularizer, 1.0, xbar - global_gradient(problem, xbar))
    return float(step @ step) + consensus_error(X)


def sparsity_pct(X: np.ndarray) -> float:
    """Average over agents of the percentage of exactly non-zero coordinates."""
    X = np.atleast_2d(np.asarray(X))
    return float(100.0 * np.mean(np.count_nonzero(X, axis=1) / X.shape[1]))


@dataclass(frozen=True)
class TraceRecord:
    k: int
    loss: float
    stationarity_def2: float
    stationarity_def2_z: float
    stationarity_exp: float
    consensus: float
    sparsity_pct: float
    samples_used: int
    grad_evals: int
    comm_rounds: int
    tracking_gap: float
    accuracy: float = float("nan")

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> dict:
        return asdict(self)


def make_record(
    k: int,
    X: np.ndarray,
    Z: np.ndarray,
    Y: np.ndarray,
    D: np.ndarray,
    problem: ProblemInstance,
    eta: float,
    samples_used: int,
    grad_evals: int,
    comm_rounds: int,
) -> TraceRecord:
    xbar = X.mean(axis=0)
    return TraceRecord(
        k=k,
        loss=objective(problem, xbar),
        stationarity_def2=stationarity_def2(X, problem, eta),
        stationarity_def2_z=stationarity_def2(Z, problem, eta),
        stationarity_exp=stationarity_experiment(X, problem),
        consensus=consensus_error(X),
        sparsity_pct=sparsity_pct(X),
        samples_used=samples_used,
        grad_evals=grad_evals,
        comm_rounds=comm_rounds,
        tracking_gap=float(np.linalg.norm(Y.mean(axis=0) - D.mean(axis=0))),
        accuracy=accuracy(problem, xbar),
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_trace_csv(path: str | Path, records: list[TraceRecord]) -> None:
    """Header row then one row per record, columns in :meth:`TraceRecord.columns` order."""
    cols = TraceRecord.columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            d = r.row()
            w.writerow([_fmt(d[c]) for c in cols])


def read_trace_csv(path: str | Path) -> list[TraceRecord]:
    ints = {"k", "samples_used", "grad_evals", "comm_rounds"}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TraceRecord.columns():
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [
            TraceRecord(**{c: (int(v) if c in ints else float(v)) for c, v in row.items()})
            for row in reader
        ]
