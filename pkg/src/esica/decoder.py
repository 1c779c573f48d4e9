"""U-Net style decoder with DCFormerV2 skip adapters and the similarity mask head."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import DCFormerV2Block, FeaturePyramid
from .errors import ConfigurationError, ContractError
from .layers import ChannelNorm, Conv3d, Dense, Resize, activation
from .numerics.cost import LayerSpec


@dataclass
class DecoderConfig:
    hidden_dim: int = 32
    adapter_kernels: list[int] = field(default_factory=lambda: [7, 5, 3])
    activation: str = "gelu"
    head: str = "similarity"
    block_norm: bool = True

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ConfigurationError("decoder.hidden_dim must be positive")
        ks = self.adapter_kernels
        if any(k < 3 or k % 2 == 0 for k in ks):
            raise ConfigurationError(f"decoder.adapter_kernels must be odd and >= 3, got {ks}")
        if any(a < b for a, b in zip(ks, ks[1:])):
            raise ConfigurationError(f"decoder.adapter_kernels must be non-increasing fine->coarse, got {ks}")
        if self.head not in ("similarity", "conv"):
            raise ConfigurationError(f"decoder.head must be 'similarity' or 'conv', got {self.head!r}")
        activation(self.activation)


class Adapter(nn.Module):
    """Pointwise projection to the shared width followed by one DCFormerV2 block."""

    def __init__(self, c_in: int, hidden: int, kernel: int, act: str = "gelu", norm: bool = True):
        super().__init__()
        self.proj = Conv3d(c_in, hidden, 1)
        self.block = DCFormerV2Block(hidden, kernel, act, local_branch=True, norm=norm)

    def forward(self, x):
        return self.block(self.proj(x))

    def specs(self, extent, name):
        return [self.proj.spec(extent, f"{name}.proj"), *self.block.specs(extent, f"{name}.block")]


def adapter_apply(adapter: Adapter, level_features: torch.Tensor) -> torch.Tensor:
    return adapter(level_features)


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, level_channels: list[int], d_model: int):
        super().__init__()
        if len(cfg.adapter_kernels) != len(level_channels):
            raise ConfigurationError(
                f"decoder.adapter_kernels has {len(cfg.adapter_kernels)} entries for {len(level_channels)} levels")
        h = cfg.hidden_dim
        self.cfg = cfg
        self.act = activation(cfg.activation)
        self.adapters = nn.ModuleList(
            Adapter(c, h, k, cfg.activation, cfg.block_norm) for c, k in zip(level_channels, cfg.adapter_kernels))
        self.token_proj = Conv3d(d_model, h, 1)
        self.coarse_fuse = Conv3d(2 * h, h, 1)
        n_up = len(level_channels) - 1
        self.ups = nn.ModuleList(Resize(h, 2) for _ in range(n_up))
        self.refines = nn.ModuleList(Conv3d(h, h, 3) for _ in range(n_up))
        self.fuses = nn.ModuleList(Conv3d(2 * h, h, 1) for _ in range(n_up))
        # unit-scale output keeps the bilinear mask head away from its zero saddle
        self.out_norm = ChannelNorm(h)

    def forward(self, pyramid: FeaturePyramid, tokens: torch.Tensor) -> torch.Tensor:
        coarse = pyramid.coarsest
        b, _, *grid = coarse.shape
        if tokens.shape[1] != grid[0] * grid[1] * grid[2]:
            raise ContractError(f"{tokens.shape[1]} fused tokens do not fill the coarsest grid {tuple(grid)}")
        x = tokens.transpose(1, 2).reshape(b, -1, *grid)
        x = self.token_proj(x)
        x = torch.cat([x, self.adapters[-1](coarse)], dim=1)
        x = self.coarse_fuse(x)
        for i in reversed(range(len(self.ups))):
            x = self.act(x)
            x = self.act(self.refines[i](self.ups[i](x)))
            x = self.fuses[i](torch.cat([x, self.adapters[i](pyramid[i])], dim=1))
        return self.out_norm(x)

    def specs(self, level_shapes, name: str = "decoder") -> list[LayerSpec]:
        """``level_shapes`` is ``[(channels, extent), ...]`` finest first."""
        out = []
        grid = level_shapes[-1][1]
        out.append(self.token_proj.spec(grid, f"{name}.token_proj"))
        out += self.adapters[-1].specs(grid, f"{name}.adapters.{len(level_shapes) - 1}")
        out.append(self.coarse_fuse.spec(grid, f"{name}.coarse_fuse"))
        extent = grid
        for i in reversed(range(len(self.ups))):
            out.append(self.ups[i].spec(extent, f"{name}.ups.{i}"))
            extent = out[-1].out_extent
            out.append(self.refines[i].spec(extent, f"{name}.refines.{i}"))
            out += self.adapters[i].specs(level_shapes[i][1], f"{name}.adapters.{i}")
            out.append(self.fuses[i].spec(extent, f"{name}.fuses.{i}"))
        out.append(self.out_norm.spec(extent, f"{name}.out_norm"))
        return out


def similarity_mask(f_img: torch.Tensor, f_text: torch.Tensor) -> torch.Tensor:
    """Voxel-wise dot product of an aligned text vector with image features.

    ``f_img`` is ``[B, C, H, W, D]`` (or unbatched) and ``f_text`` is ``[B, C]``
    (or ``[C]``); returns logits of shape ``[B, 1, H, W, D]``.
    """
    unbatched = f_img.dim() == 4
    if unbatched:
        f_img, f_text = f_img.unsqueeze(0), f_text.unsqueeze(0)
    if f_text.shape[-1] != f_img.shape[1]:
        raise ContractError(f"text width {f_text.shape[-1]} != image channels {f_img.shape[1]}")
    m = torch.einsum("bc,bchwd->bhwd", f_text, f_img).unsqueeze(1)
    return m.squeeze(0) if unbatched else m


class SimilarityHead(nn.Module):
    """Two-layer GELU MLP aligning the text token to the image channels, then a dot product."""

    def __init__(self, d_model: int, channels: int):
        super().__init__()
        self.fc1 = Dense(d_model, channels)
        self.fc2 = Dense(channels, channels)

    def align(self, text_token):
        return self.fc2(F.gelu(self.fc1(text_token)))

    def forward(self, f_img, text_token):
        return similarity_mask(f_img, self.align(text_token))

    def specs(self, extent, name="head"):
        c = self.fc2.out_features
        n = extent[0] * extent[1] * extent[2]
        # the dot product is a 1-output pointwise map over the C channels
        return [self.fc1.spec(1, f"{name}.fc1"), self.fc2.spec(1, f"{name}.fc2"),
                LayerSpec("linear", c, 1, tokens=n, name=f"{name}.dot", reuse=True)]


class ConvHead(nn.Module):
    """Text-independent ablation head: a learned 1x1x1 conv to one channel."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = Conv3d(channels, 1, 1)

    def forward(self, f_img, text_token=None):
        return self.conv(f_img)

    def specs(self, extent, name="head"):
        return [self.conv.spec(extent, f"{name}.conv")]
