"""DCFormerV2 image encoder producing a multi-resolution feature pyramid."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigurationError, ContractError
from .fusion import MLP, GroupedQueryAttention
from .layers import AxialConv, ChannelNorm, Conv3d, DepthwiseConv, TokenNorm, activation
from .numerics.cost import LayerSpec

Extent = tuple[int, int, int]


def _kernel3(k) -> tuple[int, int, int]:
    return (k, k, k) if isinstance(k, int) else tuple(k)


@dataclass
class EncoderConfig:
    in_channels: int = 1
    stem_channels: int = 32
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    stage_depths: list[int] = field(default_factory=lambda: [1, 1, 1])
    kernel: int | list[int] = 7
    activation: str = "gelu"
    attn_heads: int = 2
    mlp_ratio: int = 2
    local_branch: bool = True
    block_norm: bool = True

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_depths) or len(self.stage_channels) < 2:
            raise ConfigurationError("encoder.stage_channels and encoder.stage_depths need equal length >= 2")
        for k in _kernel3(self.kernel):
            if k < 3 or k % 2 == 0:
                raise ConfigurationError(f"encoder.kernel extents must be odd and >= 3, got {self.kernel}")
        if any(c < 1 for c in self.stage_channels) or any(d < 0 for d in self.stage_depths):
            raise ConfigurationError("encoder.stage_channels must be positive and stage_depths non-negative")
        if self.stage_channels[-1] % self.attn_heads:
            raise ConfigurationError(
                f"encoder.attn_heads ({self.attn_heads}) must divide the last stage width {self.stage_channels[-1]}")
        activation(self.activation)

    @property
    def kernels(self) -> tuple[int, int, int]:
        return _kernel3(self.kernel)

    @property
    def n_levels(self) -> int:
        return len(self.stage_channels)


@dataclass
class FeaturePyramid:
    """Encoder outputs, finest first; each level halves the previous extents."""

    levels: list[torch.Tensor]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    @property
    def coarsest(self) -> torch.Tensor:
        return self.levels[-1]


class DCFormerV2Block(nn.Module):
    """Three axial depthwise branches plus a depthwise 3x3x3 branch, summed and activated,
    then pointwise mixing, residual add and channel LayerNorm."""

    def __init__(self, channels: int, kernel=7, act: str = "gelu", local_branch: bool = True,
                 norm: bool = True):
        super().__init__()
        kh, kw, kd = _kernel3(kernel)
        self.channels = channels
        self.branch_h = AxialConv(channels, kh, "h")
        self.branch_w = AxialConv(channels, kw, "w")
        self.branch_d = AxialConv(channels, kd, "d")
        self.branch_local = DepthwiseConv(channels, 3) if local_branch else None
        self.act = activation(act)
        self.pointwise = Conv3d(channels, channels, 1)
        self.norm = ChannelNorm(channels) if norm else None

    def forward(self, x):
        if x.shape[-4] != self.channels:
            raise ContractError(f"block expects {self.channels} channels, got {x.shape[-4]}")
        y = self.branch_h(x) + self.branch_w(x) + self.branch_d(x)
        if self.branch_local is not None:
            y = y + self.branch_local(x)
        y = x + self.pointwise(self.act(y))
        return self.norm(y) if self.norm is not None else y

    def specs(self, extent: Extent, name: str) -> list[LayerSpec]:
        out = [self.branch_h.spec(extent, f"{name}.branch_h"),
               self.branch_w.spec(extent, f"{name}.branch_w"),
               self.branch_d.spec(extent, f"{name}.branch_d")]
        if self.branch_local is not None:
            out.append(self.branch_local.spec(extent, f"{name}.branch_local"))
        out.append(self.pointwise.spec(extent, f"{name}.pointwise"))
        if self.norm is not None:
            out.append(self.norm.spec(extent, f"{name}.norm"))
        return out


def dcformer_v2_block(block: DCFormerV2Block, x: torch.Tensor) -> torch.Tensor:
    return block(x)


class TransformerLayer(nn.Module):
    """Pre-norm multi-head self-attention + MLP over flattened voxels."""

    def __init__(self, channels: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = TokenNorm(channels)
        self.attn = GroupedQueryAttention(channels, heads, heads)
        self.norm2 = TokenNorm(channels)
        self.mlp = MLP(channels, mlp_ratio * channels)

    def forward(self, x):
        b, c, h, w, d = x.shape
        t = x.flatten(2).transpose(1, 2)
        n = self.norm1(t)
        t = t + self.attn(n, n)
        t = t + self.mlp(self.norm2(t))
        return t.transpose(1, 2).reshape(b, c, h, w, d)

    def specs(self, extent: Extent, name: str) -> list[LayerSpec]:
        n = math.prod(extent)
        return [self.norm1.spec(n, f"{name}.norm1"), self.attn.spec(n, n, f"{name}.attn"),
                self.norm2.spec(n, f"{name}.norm2"), *self.mlp.specs(n, f"{name}.mlp")]


class Stage(nn.Module):
    def __init__(self, c_in: int, c_out: int, depth: int, cfg: EncoderConfig, downsample: bool):
        super().__init__()
        if downsample:
            self.entry = Conv3d(c_in, c_out, 3, stride=2)
        elif c_in != c_out:
            self.entry = Conv3d(c_in, c_out, 1)
        else:
            self.entry = None
        self.blocks = nn.ModuleList(
            DCFormerV2Block(c_out, cfg.kernels, cfg.activation, cfg.local_branch, cfg.block_norm)
            for _ in range(depth))

    def forward(self, x):
        if self.entry is not None:
            x = self.entry(x)
        for blk in self.blocks:
            x = blk(x)
        return x

    def specs(self, extent: Extent, name: str) -> tuple[list[LayerSpec], Extent]:
        out = []
        if self.entry is not None:
            out.append(self.entry.spec(extent, f"{name}.entry"))
            extent = out[-1].out_extent
        for i, blk in enumerate(self.blocks):
            out += blk.specs(extent, f"{name}.blocks.{i}")
        return out, extent


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.stem_proj = Conv3d(cfg.in_channels, cfg.stem_channels, 1)
        self.stem_block = DCFormerV2Block(cfg.stem_channels, cfg.kernels, cfg.activation,
                                          cfg.local_branch, cfg.block_norm)
        chans = [cfg.stem_channels] + list(cfg.stage_channels)
        self.stages = nn.ModuleList(
            Stage(chans[i], chans[i + 1], cfg.stage_depths[i], cfg, downsample=i > 0)
            for i in range(cfg.n_levels))
        self.transformer = TransformerLayer(cfg.stage_channels[-1], cfg.attn_heads, cfg.mlp_ratio)

    def check_extent(self, extent) -> None:
        f = 2 ** (self.cfg.n_levels - 1)
        if any(n % f for n in extent):
            raise ConfigurationError(f"input extents {tuple(extent)} must be divisible by {f}; pad the volume first")

    def forward(self, volume: torch.Tensor) -> FeaturePyramid:
        if volume.dim() == 4:
            volume = volume.unsqueeze(0)
        self.check_extent(volume.shape[-3:])
        x = self.stem_block(self.stem_proj(volume))
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        levels[-1] = self.transformer(levels[-1])
        return FeaturePyramid(levels)

    def level_shapes(self, extent: Extent) -> list[tuple[int, Extent]]:
        out = []
        for i, c in enumerate(self.cfg.stage_channels):
            out.append((c, tuple(math.ceil(n / 2 ** i) for n in extent)))
        return out

    def specs(self, extent: Extent, name: str = "encoder") -> list[LayerSpec]:
        extent = tuple(extent)
        out = [self.stem_proj.spec(extent, f"{name}.stem_proj")]
        out += self.stem_block.specs(extent, f"{name}.stem_block")
        for i, stage in enumerate(self.stages):
            s, extent = stage.specs(extent, f"{name}.stages.{i}")
            out += s
        out += self.transformer.specs(extent, f"{name}.transformer")
        return out


def encode(encoder: Encoder, volume: torch.Tensor) -> FeaturePyramid:
    return encoder(volume)


def block_count_channels(cfg: EncoderConfig) -> list[int]:
    """Channel width of every DCFormerV2 block in the encoder, stem included."""
    out = [cfg.stem_channels]
    for c, depth in zip(cfg.stage_channels, cfg.stage_depths):
        out += [c] * depth
    return out
