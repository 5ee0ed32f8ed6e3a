"""Adaptive-moment optimization with decoupled weight decay, and learning-rate schedules."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from gcfdm.autodiff import Tensor
from gcfdm.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class MomentState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    t: int = 0


def optimizer_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: MomentState,
    lr: float,
    weight_decay: float = 1e-4,
    betas: Sequence[float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> np.ndarray:
    """
    One AdamW update; the moments in ``state`` are advanced in place.

    Returns:
        np.ndarray: the updated parameters (a new array)
    """
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeError(f"optimizer_step: shapes {params.shape}, {grads.shape}, {state.first_moment.shape}")
    beta1, beta2 = betas
    state.t += 1
    state.first_moment = beta1 * state.first_moment + (1 - beta1) * grads
    state.second_moment = beta2 * state.second_moment + (1 - beta2) * grads**2
    m_hat = state.first_moment / (1 - beta1**state.t)
    v_hat = state.second_moment / (1 - beta2**state.t)
    return params - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * params)


class AdamW:
    """AdamW over a list of tensors; gradients are read from ``Tensor.grad``"""

    def __init__(
        self,
        params: List[Tensor],
        lr: float = 1e-4,
        betas: Sequence[float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: Dict[int, MomentState] = {
            k: MomentState(np.zeros_like(p.data), np.zeros_like(p.data)) for k, p in enumerate(self.params)
        }

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data = optimizer_step(
                p.data, p.grad, self.state[k], self.lr, self.weight_decay, self.betas, self.eps
            )


@dataclass
class StepDecay:
    """lr * factor once ``epoch`` reaches ``decay_epoch``"""

    lr: float
    decay_epoch: int
    factor: float = 0.1

    def __call__(self, epoch: int) -> float:
        return self.lr * self.factor if epoch >= self.decay_epoch else self.lr


@dataclass
class WarmRestarts:
    """
    Cosine annealing with warm restarts: within a cycle of length T the rate
    falls from ``lr_max`` to ``lr_min``; each cycle is ``growth`` times longer
    than the previous one.
    """

    lr_max: float
    lr_min: float = 0.0
    period: int = 500
    growth: int = 2

    def __call__(self, iteration: int) -> float:
        start, length = 0, self.period
        while iteration >= start + length:
            start += length
            length *= self.growth
        phase = (iteration - start) / length
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * phase))

    def is_restart(self, iteration: int) -> bool:
        start, length = 0, self.period
        while iteration > start:
            start += length
            length *= self.growth
        return iteration == start
