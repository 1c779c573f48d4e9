"""Parameterised leaf layers built on the numerics ops.

Each leaf knows the LayerSpec it executes (``spec``) so that the analytic cost
walk and the runtime shape probe can both describe it.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .numerics import ops
from .numerics.cost import LayerSpec

Extent = tuple[int, int, int]


def _fan_in_uniform(t: torch.Tensor, fan_in: int) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(t, -bound, bound)


class Conv3d(nn.Module):
    """Dense conv with same padding (odd kernels only)."""

    def __init__(self, c_in: int, c_out: int, kernel: int | Extent = 1, stride: int = 1):
        super().__init__()
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.weight = nn.Parameter(torch.empty(c_out, c_in, *kernel))
        self.bias = nn.Parameter(torch.empty(c_out))
        fan_in = c_in * math.prod(kernel)
        _fan_in_uniform(self.weight, fan_in)
        _fan_in_uniform(self.bias, fan_in)

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, self.stride)

    def spec(self, extent: Extent, name: str = "") -> LayerSpec:
        return LayerSpec("dense_conv3d", self.c_in, self.c_out, self.kernel, tuple(extent),
                         stride=self.stride, name=name)


class AxialConv(nn.Module):
    def __init__(self, channels: int, k: int, axis: str):
        super().__init__()
        self.channels, self.k, self.axis = channels, k, axis
        self.weight = nn.Parameter(torch.empty(channels, k))
        self.bias = nn.Parameter(torch.empty(channels))
        _fan_in_uniform(self.weight, k)
        _fan_in_uniform(self.bias, k)

    def forward(self, x):
        return ops.depthwise_axial_conv3d(x, self.axis, self.weight, self.bias)

    def spec(self, extent: Extent, name: str = "") -> LayerSpec:
        kernel = [1, 1, 1]
        kernel["hwd".index(self.axis)] = self.k
        return LayerSpec("depthwise_axial_conv3d", self.channels, self.channels, tuple(kernel),
                         tuple(extent), name=name)


class DepthwiseConv(nn.Module):
    def __init__(self, channels: int, k: int = 3):
        super().__init__()
        self.channels, self.k = channels, k
        self.weight = nn.Parameter(torch.empty(channels, k, k, k))
        self.bias = nn.Parameter(torch.empty(channels))
        _fan_in_uniform(self.weight, k ** 3)
        _fan_in_uniform(self.bias, k ** 3)

    def forward(self, x):
        return ops.depthwise_conv3d(x, self.weight, self.bias)

    def spec(self, extent: Extent, name: str = "") -> LayerSpec:
        return LayerSpec("depthwise_full_conv3d", self.channels, self.channels, (self.k,) * 3,
                         tuple(extent), name=name)


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a ``[N, C, H, W, D]`` volume."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return ops.channel_layer_norm(x, self.weight, self.bias)

    def spec(self, extent: Extent, name: str = "") -> LayerSpec:
        return LayerSpec("norm", self.channels, self.channels, tokens=math.prod(extent), name=name)


class TokenNorm(nn.LayerNorm):
    """LayerNorm over the last axis of a token tensor."""

    def spec(self, tokens: int, name: str = "") -> LayerSpec:
        c = self.normalized_shape[0]
        return LayerSpec("norm", c, c, tokens=tokens, name=name)


class Dense(nn.Linear):
    def spec(self, tokens: int, name: str = "") -> LayerSpec:
        return LayerSpec("linear", self.in_features, self.out_features, tokens=tokens, name=name)


class Resize(nn.Module):
    """Trilinear resampling to a fixed scale factor of the input extent."""

    def __init__(self, channels: int, factor: int = 2):
        super().__init__()
        self.channels, self.factor = channels, factor

    def forward(self, x):
        return ops.trilinear_resize(x, [n * self.factor for n in x.shape[-3:]])

    def spec(self, extent: Extent, name: str = "") -> LayerSpec:
        target = tuple(n * self.factor for n in extent)
        return LayerSpec("resize", self.channels, self.channels, input_extent=tuple(extent),
                         output_extent=target, name=name)


def parameter_spec(p: torch.Tensor, name: str) -> LayerSpec:
    return LayerSpec("parameter", 1, p.numel(), name=name)


ACTIVATIONS = {"gelu": F.gelu, "relu": F.relu}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigurationError(f"activation must be one of {sorted(ACTIVATIONS)}, got {name!r}") from None
