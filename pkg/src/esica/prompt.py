"""Sparse/dense prompt construction for each refinement pass."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import DCFormerV2Block
from .errors import ConfigurationError, ContractError
from .layers import Conv3d, Dense, parameter_spec
from .numerics.cost import LayerSpec, count_params, reused


@dataclass
class PromptConfig:
    mask_channels: int = 8
    mask_kernel: int = 5
    activation: str = "gelu"

    def __post_init__(self):
        if self.mask_channels < 1:
            raise ConfigurationError("prompt.mask_channels must be positive")
        if self.mask_kernel < 3 or self.mask_kernel % 2 == 0:
            raise ConfigurationError(f"prompt.mask_kernel must be odd and >= 3, got {self.mask_kernel}")


@dataclass
class PromptState:
    sparse: torch.Tensor    # [B, n_sparse, d_model]
    dense: torch.Tensor     # [B, d_model, H_t, W_t, D_t]
    iteration: int

    def __post_init__(self):
        expected = 1 if self.iteration == 1 else 2
        if self.iteration < 1 or self.sparse.shape[-2] != expected:
            raise ContractError(
                f"iteration {self.iteration} needs {expected} sparse tokens, got {self.sparse.shape[-2]}")


class MaskFeatureExtractor(nn.Module):
    """Mask logits -> dense prompt grid: per halving, a decomposed block then a
    stride-2 3x3x3 conv; a final pointwise projection to ``d_model``."""

    def __init__(self, cfg: PromptConfig, n_down: int, d_model: int):
        super().__init__()
        self.lift = Conv3d(1, cfg.mask_channels, 1)
        chans = [cfg.mask_channels * 2 ** i for i in range(n_down + 1)]
        self.blocks = nn.ModuleList(
            DCFormerV2Block(chans[i], cfg.mask_kernel, cfg.activation) for i in range(n_down))
        self.downs = nn.ModuleList(Conv3d(chans[i], chans[i + 1], 3, stride=2) for i in range(n_down))
        self.out = Conv3d(chans[-1], d_model, 1)

    def forward(self, logits):
        x = self.lift(logits)
        for blk, down in zip(self.blocks, self.downs):
            x = down(blk(x))
        return self.out(x)

    def specs(self, extent, name: str) -> list[LayerSpec]:
        extent = tuple(extent)
        out = [self.lift.spec(extent, f"{name}.lift")]
        for i, (blk, down) in enumerate(zip(self.blocks, self.downs)):
            out += blk.specs(extent, f"{name}.blocks.{i}")
            out.append(down.spec(extent, f"{name}.downs.{i}"))
            extent = out[-1].out_extent
        out.append(self.out.spec(extent, f"{name}.out"))
        return out


class PromptEncoder(nn.Module):
    def __init__(self, cfg: PromptConfig, d_text: int, d_model: int, n_down: int):
        super().__init__()
        self.d_model = d_model
        self.text_proj = Dense(d_text, d_model)
        self.dense_template = nn.Parameter(torch.randn(d_model) * 0.02)
        self.extractor = MaskFeatureExtractor(cfg, n_down, d_model)

    def project_text(self, text_vec: torch.Tensor) -> torch.Tensor:
        """[B, d_text] -> [B, d_model]."""
        return self.text_proj(text_vec)

    def build_initial(self, text_token: torch.Tensor, grid) -> PromptState:
        b = text_token.shape[0]
        dense = self.dense_template.view(1, -1, 1, 1, 1).expand(b, -1, *grid)
        return PromptState(text_token.unsqueeze(1), dense, 1)

    def build_refined(self, text_token: torch.Tensor, prev_logits: torch.Tensor,
                      prev_mask_token: torch.Tensor, grid, iteration: int = 2,
                      ablate: bool = False) -> PromptState:
        dense = self.extractor(prev_logits)
        if tuple(dense.shape[-3:]) != tuple(grid):
            raise ContractError(
                f"mask of extent {tuple(prev_logits.shape[-3:])} maps to grid {tuple(dense.shape[-3:])}, "
                f"expected {tuple(grid)}")
        if ablate:
            dense = torch.zeros_like(dense)
        sparse = torch.stack([text_token, prev_mask_token], dim=1)
        return PromptState(sparse, dense, iteration)

    def specs(self, extent, n_passes: int, name: str = "prompt") -> list[LayerSpec]:
        out = [self.text_proj.spec(1, f"{name}.text_proj"),
               parameter_spec(self.dense_template, f"{name}.dense_template")]
        if n_passes < 2:
            # weights exist even when the feedback path never runs
            n = sum(count_params(s) for s in self.extractor.specs(extent, ""))
            return out + [LayerSpec("parameter", 1, n, name=f"{name}.extractor")]
        for p in range(2, n_passes + 1):
            specs = self.extractor.specs(extent, f"{name}.extractor")
            out += specs if p == 2 else [reused(s) for s in specs]
        return out


def n_downsamplings(patch_extent, grid) -> int:
    ratio = patch_extent[0] // grid[0]
    n = int(round(math.log2(ratio)))
    if 2 ** n != ratio:
        raise ConfigurationError(f"patch/grid ratio {ratio} is not a power of two")
    return n
