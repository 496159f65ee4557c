"""Plain SGD with gradient accumulation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class SGD:
    """``p <- p - lr * accumulated_grad / accumulation_count``.

    Gradients accumulate in ``Tensor.grad`` across backward passes; call
    :meth:`record` after each one and :meth:`step` applies the update once
    ``accumulation_count`` batches have been recorded.
    """

    params: Sequence[Tensor]
    learning_rate: float = 5e-4
    accumulation_count: int = 1
    pending: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.accumulation_count < 1:
            raise ValueError(f"accumulation_count must be >= 1, got {self.accumulation_count}")
        self.params = list(self.params)

    def record(self) -> bool:
        """Count one backward pass; True when an update is due."""
        self.pending += 1
        return self.pending >= self.accumulation_count

    def step(self) -> None:
        sgd_step(self.params, self.learning_rate, self.accumulation_count)
        self.pending = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
        self.pending = 0


def sgd_step(params: Sequence[Tensor], learning_rate: float, accumulation_count: int = 1) -> None:
    missing = [k for k, p in enumerate(params) if p.grad is None]
    if missing:
        raise ValueError(f"sgd_step: parameters {missing[:5]} have no gradient")
    scale = learning_rate / accumulation_count
    for p in params:
        p.data = p.data - np.asarray(scale * p.grad, dtype=p.dtype)
        p.grad = None


@dataclass
class Adam(SGD):
    """Adam on the accumulated-and-averaged gradient (same accumulation contract as SGD)."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    def __post_init__(self):
        super().__post_init__()
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        missing = [k for k, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ValueError(f"adam step: parameters {missing[:5]} have no gradient")
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad / self.accumulation_count
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - update.astype(p.dtype)
            p.grad = None
        self.pending = 0
