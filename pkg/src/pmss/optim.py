"""Momentum SGD over explicit parameter lists."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class OptimError(RuntimeError):
    """A step was requested while some parameter has no gradient."""


class SGD:
    """v <- momentum*v + grad; p <- p - lr*v; grads cleared after the step.

    ``param_groups`` maps parameter lists to learning rates so prompt
    parameters can run at a multiple of the head rate. Weight decay adds
    ``wd * p`` to the gradient before the velocity update.
    """

    def __init__(
        self,
        params: list[Tensor] | None = None,
        lr: float = 0.1,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        param_groups: list[tuple[list[Tensor], float]] | None = None,
    ):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {momentum}")
        if lr < 0.0:
            raise ValueError(f"learning rate must be nonnegative, got {lr}")
        if param_groups is None:
            param_groups = [(list(params or []), lr)]
        self.groups = [(list(ps), float(glr)) for ps, glr in param_groups]
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = [
            [np.zeros(p.shape) for p in ps] for ps, _ in self.groups
        ]

    def params(self):
        for ps, _ in self.groups:
            yield from ps

    def step(self) -> None:
        for (ps, lr), vs in zip(self.groups, self._velocity):
            for p, v in zip(ps, vs):
                if p.grad is None:
                    name = p.name or f"tensor{p.shape}"
                    raise OptimError(f"parameter {name} has no gradient; run backward first")
                g = p.grad
                if self.weight_decay:
                    g = g + self.weight_decay * p.data
                v *= self.momentum
                v += g
                p.data -= lr * v
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None
