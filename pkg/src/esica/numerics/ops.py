"""Differentiable volumetric primitives.

Every op accepts either an unbatched ``[C, H, W, D]`` tensor or a batched
``[N, C, H, W, D]`` tensor and returns the same rank it was given.  Padding is
zero ("same") everywhere; interpolation uses half-pixel centers.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F

from ..errors import ConfigurationError, ContractError, EvaluationError

AXES = {"h": 2, "w": 3, "d": 4}


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 4:
        return x.unsqueeze(0), True
    if x.dim() == 5:
        return x, False
    raise ContractError(f"expected a [C,H,W,D] or [N,C,H,W,D] tensor, got shape {tuple(x.shape)}")


def _restore(y: torch.Tensor, squeezed: bool) -> torch.Tensor:
    return y.squeeze(0) if squeezed else y


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise EvaluationError(f"non-finite values produced by {where}")
    return x


def _check_odd(kernel: Sequence[int]) -> None:
    for k in kernel:
        if k < 1 or k % 2 == 0:
            raise ConfigurationError(f"kernel extents must be odd and >= 1, got {tuple(kernel)}")


def _conv(x, weight, bias, stride, pad, groups):
    if stride == 1 and max(weight.shape[2:]) > 1:
        # channels-last selects the fast CPU kernel for spatial stencils
        x = x.contiguous(memory_format=torch.channels_last_3d)
        return F.conv3d(x, weight, bias, stride, pad, groups=groups).contiguous()
    return F.conv3d(x, weight, bias, stride, pad, groups=groups)


def conv3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1) -> torch.Tensor:
    """Dense 3D convolution with same padding; output extent is ceil(n / stride)."""
    xb, squeezed = _batched(x)
    if weight.dim() != 5:
        raise ContractError(f"weight must be [C_out,C_in,kh,kw,kd], got {tuple(weight.shape)}")
    _check_odd(weight.shape[2:])
    if stride not in (1, 2):
        raise ConfigurationError(f"stride must be 1 or 2, got {stride}")
    if weight.shape[1] != xb.shape[1]:
        raise ContractError(f"input has {xb.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractError(f"bias must have shape ({weight.shape[0]},), got {tuple(bias.shape)}")
    pad = tuple(k // 2 for k in weight.shape[2:])
    y = _conv(xb, weight, bias, stride, pad, 1)
    return _restore(y, squeezed)


def depthwise_axial_conv3d(x: torch.Tensor, axis: str, weight: torch.Tensor,
                           bias: torch.Tensor | None = None) -> torch.Tensor:
    """Per-channel 1-D convolution along ``axis`` (one of ``h``, ``w``, ``d``).

    ``weight`` has shape ``[C, k]``.
    """
    xb, squeezed = _batched(x)
    if axis not in AXES:
        raise ConfigurationError(f"axis must be one of h/w/d, got {axis!r}")
    if weight.dim() != 2 or weight.shape[0] != xb.shape[1]:
        raise ContractError(f"weight must be [C={xb.shape[1]}, k], got {tuple(weight.shape)}")
    k = weight.shape[1]
    _check_odd((k,))
    extent = xb.shape[AXES[axis]]
    if k > 2 * extent + 1:
        raise ConfigurationError(f"kernel {k} exceeds 2*extent+1 = {2 * extent + 1} along {axis}")
    # run as a depth-axis conv on a transposed view: the h-axis stencil is slow on CPU
    dim = AXES[axis]
    xt = xb.transpose(dim, 4) if dim != 4 else xb
    y = _conv(xt, weight.reshape(weight.shape[0], 1, 1, 1, k), bias, 1, (0, 0, k // 2), xb.shape[1])
    if dim != 4:
        y = y.transpose(dim, 4).contiguous()
    return _restore(y, squeezed)


def depthwise_conv3d(x: torch.Tensor, weight: torch.Tensor,
                     bias: torch.Tensor | None = None) -> torch.Tensor:
    """Per-channel full 3D convolution; ``weight`` is ``[C, kh, kw, kd]``."""
    xb, squeezed = _batched(x)
    if weight.dim() != 4 or weight.shape[0] != xb.shape[1]:
        raise ContractError(f"weight must be [C={xb.shape[1]}, kh, kw, kd], got {tuple(weight.shape)}")
    _check_odd(weight.shape[1:])
    pad = tuple(k // 2 for k in weight.shape[1:])
    y = _conv(xb, weight.unsqueeze(1), bias, 1, pad, xb.shape[1])
    return _restore(y, squeezed)


def trilinear_resize(x: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """Trilinear resampling with align-corners-false (half-pixel) sampling.

    Source coordinate of output index ``i`` is ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]``.
    """
    xb, squeezed = _batched(x)
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ContractError(f"target extents must be three positive ints, got {target}")
    if target == tuple(xb.shape[2:]):
        return x.clone()
    y = F.interpolate(xb, size=target, mode="trilinear", align_corners=False)
    return _restore(y, squeezed)


def channel_layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                       eps: float = 1e-5) -> torch.Tensor:
    """Layer normalization across the channel axis of a volume, per voxel."""
    xb, squeezed = _batched(x)
    mean = xb.mean(dim=1, keepdim=True)
    var = (xb - mean).pow(2).mean(dim=1, keepdim=True)
    y = (xb - mean) * torch.rsqrt(var + eps)
    y = y * weight.view(1, -1, 1, 1, 1) + bias.view(1, -1, 1, 1, 1)
    return _restore(y, squeezed)


def out_extent(n: int, stride: int) -> int:
    return math.ceil(n / stride)
