"""SGD with momentum and the learning-rate schedules used by the trainers."""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from retro.autograd import DTYPE, Parameter


class MissingGradientError(RuntimeError):
    pass


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """One SGD update: v <- mu*v + g + wd*theta ; theta <- theta - lr*v.

    Frozen parameters are skipped entirely, so their bytes never change.
    """
    params = [p for p in params if p.trainable]
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise MissingGradientError(f"trainable parameters without gradient: {missing}")
    for p in params:
        d = p.grad
        if weight_decay:
            d = d + DTYPE(weight_decay) * p.data
        if momentum:
            if p.momentum_buffer is None:
                p.momentum_buffer = np.zeros_like(p.data)
            p.momentum_buffer *= DTYPE(momentum)
            p.momentum_buffer += d
            d = p.momentum_buffer
        np.subtract(p.data, DTYPE(lr) * d, out=p.data)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Half-cosine decay evaluated once per epoch."""
    if total_epochs <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def step_lr(base_lr: float, epoch: int, total_epochs: int,
            milestones: Sequence[float], factor: float) -> float:
    """Divide ``base_lr`` by ``factor`` at each milestone (fractions of the run)."""
    drops = sum(1 for m in milestones if epoch >= round(m * total_epochs))
    return base_lr / factor ** drops
