"""Adam with decoupled weight decay, plus the captioner's step-decay schedule."""

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .nn import Parameter

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    exp_avg: list[np.ndarray]
    exp_avg_sq: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    skipped: list[int] = field(default_factory=list)


def adam_step(params: list[Parameter], state: AdamState) -> AdamState:
    """One Adam update with bias correction, then ``p <- p - lr * wd * p``.

    Parameters that are frozen or carry no gradient are left untouched; the step
    counter advances once per call regardless.
    """
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    state.skipped = []

    for index, (p, m, v) in enumerate(zip(params, state.exp_avg, state.exp_avg_sq)):
        if not p.requires_grad or p.grad is None:
            state.skipped.append(index)
            continue
        grad = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data = p.data - state.learning_rate * update
        if state.weight_decay:
            p.data = p.data - state.learning_rate * state.weight_decay * p.data
    return state


class Adam:
    def __init__(
        self,
        params: Iterable[Parameter],
        learning_rate: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.state = AdamState(
            exp_avg=[np.zeros_like(p.data) for p in self.params],
            exp_avg_sq=[np.zeros_like(p.data) for p in self.params],
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            learning_rate=learning_rate,
            weight_decay=weight_decay,
        )

    @property
    def learning_rate(self) -> float:
        return self.state.learning_rate

    @learning_rate.setter
    def learning_rate(self, value: float) -> None:
        self.state.learning_rate = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


def step_decay(base_rate: float, epoch: int, decay_epoch: int | None, factor: float = 0.1) -> float:
    """``base_rate`` until ``decay_epoch`` epochs have completed, ``base_rate * factor`` after."""
    if decay_epoch is None or decay_epoch <= 0 or epoch < decay_epoch:
        return base_rate
    return base_rate * factor
