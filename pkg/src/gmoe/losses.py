"""Classification loss and the expert-balancing auxiliary losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, cross_entropy

DEFAULT_LAMBDA = 0.01

__all__ = [
    "DEFAULT_LAMBDA", "LossBreakdown", "cross_entropy", "squared_cv",
    "importance_loss", "load_loss", "total_loss",
]


@dataclass
class LossBreakdown:
    classification: float
    importance: float
    load: float
    total: float
    lam: float


def squared_cv(values: Tensor) -> Tensor:
    """``(std / mean)²`` with the population standard deviation."""
    values = values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=float))
    m = T.mean(values)
    if m.item() == 0.0:
        raise ZeroDivisionError("squared_cv: mean of values is zero")
    centered = T.sub(values, m)
    var = T.mean(T.square(centered))
    return T.div(var, T.square(m))


def importance_loss(gate_weights: Tensor) -> Tensor:
    """CV² of per-expert summed gate weights over all tokens ``[tokens, N]``."""
    return squared_cv(T.tsum(gate_weights, axis=0))


def load_loss(load_prob: Tensor) -> Tensor:
    """CV² of per-expert summed selection probabilities ``[tokens, N]``."""
    return squared_cv(T.tsum(load_prob, axis=0))


def total_loss(cls, imp, load, lam: float = DEFAULT_LAMBDA):
    """``cls + (lam / 2) * (imp + load)``; accepts tensors or floats."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if any(isinstance(v, Tensor) for v in (cls, imp, load)):
        return T.add(cls, T.scale(T.add(imp, load), lam / 2.0))
    return cls + (lam / 2.0) * (imp + load)
