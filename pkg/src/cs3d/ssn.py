"""Soft spiking neuron.

Forward passes the input through unchanged above the threshold and outputs
zero at or below it.  Backward does not use the true derivative of that step;
it substitutes the logistic surrogate ``sigmoid(beta * (x - theta))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _logistic


@dataclass(frozen=True)
class SsnParams:
    theta: float = 0.0
    beta: float = 2.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if math.isnan(self.theta) or self.theta == math.inf:
            raise ValueError(f"theta must be finite or -inf, got {self.theta}")


def surrogate(x: np.ndarray, p: SsnParams) -> np.ndarray:
    return _logistic(p.beta * (np.asarray(x, dtype=np.float64) - p.theta))


def ssn_backward(x: np.ndarray, p: SsnParams, upstream: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    return upstream * surrogate(x, p)


def ssn_forward(x: Tensor, p: SsnParams = SsnParams()) -> Tensor:
    xd = x.data
    y = np.where(xd > p.theta, xd, 0.0)
    return Tensor.from_op(y, (x,), lambda g: (ssn_backward(xd, p, g),), "ssn")


ssn = ssn_forward
