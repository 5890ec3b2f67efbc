"""Trainable parameter containers for convolution and affine layers.

Initialization is Kaiming-uniform over the fan-in, zero bias; layers that
must act as an exact no-op at step 0 (prompt projections, late residual
convs) are built with ``init_scale=0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, init_scale: float):
    if init_scale == 0.0:
        # keep the rng stream identical to the scaled case
        rng.uniform(-1.0, 1.0, size=shape)
        return np.zeros(shape)
    bound = init_scale * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ConvLayer:
    """Stride-1 square-kernel convolution parameters (kernel 1 or 3)."""

    in_channels: int
    out_channels: int
    kernel: int
    dilation: int = 1
    groups: int = 1
    trainable: bool = True
    weight: Tensor = field(init=False)
    bias: Tensor = field(init=False)

    @classmethod
    def build(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        dilation: int = 1,
        groups: int = 1,
        trainable: bool = True,
        init_scale: float = 1.0,
    ) -> "ConvLayer":
        if kernel not in (1, 3):
            raise ShapeError(f"ConvLayer kernel must be 1 or 3, got {kernel}")
        if in_channels <= 0 or out_channels <= 0:
            raise ShapeError("ConvLayer channel counts must be positive")
        if in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"ConvLayer channels ({in_channels}->{out_channels}) not divisible by groups={groups}"
            )
        if dilation < 1:
            raise ShapeError(f"ConvLayer dilation must be >= 1, got {dilation}")
        layer = cls.__new__(cls)
        layer.in_channels = in_channels
        layer.out_channels = out_channels
        layer.kernel = kernel
        layer.dilation = dilation
        layer.groups = groups
        layer.trainable = trainable
        fan_in = (in_channels // groups) * kernel * kernel
        w = _kaiming_uniform(
            rng, (out_channels, in_channels // groups, kernel, kernel), fan_in, init_scale
        )
        layer.weight = Tensor(w, requires_grad=trainable)
        layer.bias = Tensor(np.zeros(out_channels), requires_grad=trainable)
        return layer

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel - 1) // 2

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.weight.requires_grad = flag
        self.weight._needs = flag
        self.bias.requires_grad = flag
        self.bias._needs = flag

    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class LinearLayer:
    """Dense affine layer acting on the last axis."""

    in_features: int
    out_features: int
    trainable: bool = True
    weight: Tensor = field(init=False)
    bias: Tensor = field(init=False)

    @classmethod
    def build(
        cls,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        trainable: bool = True,
        init_scale: float = 1.0,
    ) -> "LinearLayer":
        if in_features <= 0 or out_features <= 0:
            raise ShapeError("LinearLayer feature counts must be positive")
        layer = cls.__new__(cls)
        layer.in_features = in_features
        layer.out_features = out_features
        layer.trainable = trainable
        w = _kaiming_uniform(rng, (out_features, in_features), in_features, init_scale)
        layer.weight = Tensor(w, requires_grad=trainable)
        layer.bias = Tensor(np.zeros(out_features), requires_grad=trainable)
        return layer

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.weight.requires_grad = flag
        self.weight._needs = flag
        self.bias.requires_grad = flag
        self.bias._needs = flag

    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias
