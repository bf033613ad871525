"""Regularizers with closed-form proximal mappings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Regularizer:
    """Convex regularizer ``r``. ``kind`` is ``"l1"`` (``lam * ||x||_1``) or ``"zero"``.

    New kinds must come with a closed-form prox; nothing here runs an inner
    solver.
    """

    kind: str = "zero"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("l1", "zero"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if not self.lam >= 0.0:
            raise ValueError(f"regularization strength must be >= 0, got {self.lam}")
        if self.kind == "zero" and self.lam != 0.0:
            raise ValueError("zero regularizer takes no strength")

    @classmethod
    def l1(cls, lam: float) -> "Regularizer":
        return cls("l1", float(lam))

    @classmethod
    def zero(cls) -> "Regularizer":
        return cls()

    def value(self, x: np.ndarray) -> float:
        if self.kind == "zero":
            return 0.0
        return self.lam * float(np.abs(x).sum())


def prox(r: Regularizer, eta: float, v: np.ndarray) -> np.ndarray:
    """``argmin_u eta * r(u) + ||u - v||^2 / 2``; works row-wise on matrices."""
    v = np.asarray(v, dtype=float)
    if r.kind == "zero" or r.lam == 0.0:
        return v.copy()
    # |v| == eta*lam maps to an exact zero
    return np.sign(v) * np.maximum(np.abs(v) - eta * r.lam, 0.0)


def prox_grad_map(x: np.ndarray, y: np.ndarray, eta: float, r: Regularizer) -> np.ndarray:
    """Proximal gradient mapping ``(x - prox_{eta r}(x - eta*y)) / eta``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if r.kind == "zero" or r.lam == 0.0:
        return y.copy()
    return (x - prox(r, eta, x - eta * y)) / eta


def prox_step(z: np.ndarray, y: np.ndarray, alpha: float, r: Regularizer) -> np.ndarray:
    """Local update ``argmin_x alpha*r(x) + ||x - (z - alpha*y)||^2 / 2``."""
    return prox(r, alpha, np.asarray(z, dtype=float) - alpha * np.asarray(y, dtype=float))
