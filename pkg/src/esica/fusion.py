"""Two-way prompt/image transformer with grouped-query attention and RoPE."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError
from .layers import Dense, TokenNorm, parameter_spec
from .numerics.cost import LayerSpec


@dataclass
class FusionConfig:
    d_model: int = 192
    n_layers: int = 6
    h_q: int = 12
    h_kv: int = 4
    n_mask_tokens: int = 1
    mlp_ratio: int = 2
    rope: str = "linear"

    def __post_init__(self):
        if self.h_q < 1 or self.h_kv < 1 or self.h_q % self.h_kv:
            raise ConfigurationError(f"fusion.h_q ({self.h_q}) must be a multiple of fusion.h_kv ({self.h_kv})")
        if self.d_model % self.h_q:
            raise ConfigurationError(f"fusion.d_model ({self.d_model}) must be divisible by fusion.h_q ({self.h_q})")
        if (self.d_model // self.h_q) % 2:
            raise ConfigurationError(f"fusion head dim {self.d_model // self.h_q} must be even for RoPE")
        if self.n_layers < 0 or self.n_mask_tokens < 1:
            raise ConfigurationError("fusion.n_layers must be >= 0 and fusion.n_mask_tokens >= 1")
        if self.rope not in ("linear", "none"):
            raise ConfigurationError(f"fusion.rope must be 'linear' or 'none', got {self.rope!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.h_q


@dataclass
class TokenSet:
    queries: torch.Tensor       # [B, n_q, d]
    image_kv: torch.Tensor      # [B, n_tok, d]
    token_grid: tuple[int, int, int]

    def __post_init__(self):
        n_tok = math.prod(self.token_grid)
        if self.image_kv.shape[-2] != n_tok:
            raise ContractError(f"image_kv has {self.image_kv.shape[-2]} tokens, grid {self.token_grid} needs {n_tok}")

    def positions(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Query positions (all 0) and row-major linearised image positions."""
        q_pos = torch.zeros(self.queries.shape[-2], dtype=torch.long)
        k_pos = torch.arange(self.image_kv.shape[-2], dtype=torch.long)
        return q_pos, k_pos


def rope_apply(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate feature pairs ``(x[2i], x[2i+1])`` by ``m * base**(-2i/d)``.

    ``x`` is ``[..., n, d_head]`` and ``positions`` holds the ``n`` integer positions.
    """
    d = x.shape[-1]
    if d % 2:
        raise ConfigurationError(f"RoPE needs an even head dim, got {d}")
    positions = torch.as_tensor(positions)
    if positions.shape != (x.shape[-2],):
        raise ContractError(f"positions must have shape ({x.shape[-2]},), got {tuple(positions.shape)}")
    i = torch.arange(d // 2, dtype=torch.float64)
    theta = base ** (-2.0 * i / d)
    angle = positions.to(torch.float64)[:, None] * theta[None, :]
    cos = torch.cos(angle).to(x.dtype)
    sin = torch.sin(angle).to(x.dtype)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    return torch.stack((out_even, out_odd), dim=-1).flatten(-2)


class GroupedQueryAttention(nn.Module):
    """Scaled dot-product attention where consecutive query heads share a K/V head."""

    def __init__(self, d: int, h_q: int, h_kv: int):
        super().__init__()
        if h_q % h_kv or d % h_q:
            raise ConfigurationError(f"need h_q % h_kv == 0 and d % h_q == 0 (d={d}, h_q={h_q}, h_kv={h_kv})")
        self.d, self.h_q, self.h_kv = d, h_q, h_kv
        self.d_head = d // h_q
        self.wq = Dense(d, d)
        self.wk = Dense(d, h_kv * self.d_head)
        self.wv = Dense(d, h_kv * self.d_head)
        self.wo = Dense(d, d)
        self.record = False
        self.last_weights: torch.Tensor | None = None

    def forward(self, q_in, kv_in, q_pos=None, k_pos=None):
        b, nq, _ = q_in.shape
        nk = kv_in.shape[1]
        q = self.wq(q_in).view(b, nq, self.h_q, self.d_head).transpose(1, 2)
        k = self.wk(kv_in).view(b, nk, self.h_kv, self.d_head).transpose(1, 2)
        v = self.wv(kv_in).view(b, nk, self.h_kv, self.d_head).transpose(1, 2)
        if q_pos is not None:
            q = rope_apply(q, q_pos)
        if k_pos is not None:
            k = rope_apply(k, k_pos)
        group = self.h_q // self.h_kv
        if group > 1:
            k = k.repeat_interleave(group, dim=1)
            v = v.repeat_interleave(group, dim=1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        weights = torch.softmax(scores, dim=-1)
        if self.record:
            self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(b, nq, self.d)
        return self.wo(out)

    def spec(self, n_q: int, n_kv: int, name: str = "") -> LayerSpec:
        return LayerSpec("attention", self.d, self.d, tokens=n_q, kv_tokens=n_kv,
                         heads=self.h_q, kv_heads=self.h_kv, name=name)


class MLP(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = Dense(d, hidden)
        self.fc2 = Dense(hidden, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))

    def specs(self, tokens: int, name: str) -> list[LayerSpec]:
        return [self.fc1.spec(tokens, f"{name}.fc1"), self.fc2.spec(tokens, f"{name}.fc2")]


class TwoWayBlock(nn.Module):
    """Query self-attention, query->image attention, query MLP, image->query attention.

    Every sub-step is residual and followed by a LayerNorm.
    """

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        d = cfg.d_model
        self.self_attn = GroupedQueryAttention(d, cfg.h_q, cfg.h_kv)
        self.norm1 = TokenNorm(d)
        self.cross_q2i = GroupedQueryAttention(d, cfg.h_q, cfg.h_kv)
        self.norm2 = TokenNorm(d)
        self.mlp = MLP(d, cfg.mlp_ratio * d)
        self.norm3 = TokenNorm(d)
        self.cross_i2q = GroupedQueryAttention(d, cfg.h_q, cfg.h_kv)
        self.norm4 = TokenNorm(d)

    def forward(self, queries, keys, q_pos=None, k_pos=None):
        queries = self.norm1(queries + self.self_attn(queries, queries, q_pos, q_pos))
        queries = self.norm2(queries + self.cross_q2i(queries, keys, q_pos, k_pos))
        queries = self.norm3(queries + self.mlp(queries))
        keys = self.norm4(keys + self.cross_i2q(keys, queries, k_pos, q_pos))
        return queries, keys

    def specs(self, n_q: int, n_tok: int, name: str) -> list[LayerSpec]:
        return [
            self.self_attn.spec(n_q, n_q, f"{name}.self_attn"),
            self.norm1.spec(n_q, f"{name}.norm1"),
            self.cross_q2i.spec(n_q, n_tok, f"{name}.cross_q2i"),
            self.norm2.spec(n_q, f"{name}.norm2"),
            *self.mlp.specs(n_q, f"{name}.mlp"),
            self.norm3.spec(n_q, f"{name}.norm3"),
            self.cross_i2q.spec(n_tok, n_q, f"{name}.cross_i2q"),
            self.norm4.spec(n_tok, f"{name}.norm4"),
        ]


def two_way_block(block: TwoWayBlock, tokens: TokenSet, use_rope: bool = True) -> TokenSet:
    q_pos, k_pos = tokens.positions() if use_rope else (None, None)
    queries, keys = block(tokens.queries, tokens.image_kv, q_pos, k_pos)
    return TokenSet(queries, keys, tokens.token_grid)


class FusionTransformer(nn.Module):
    """Stack of two-way blocks followed by a final query->image attention."""

    def __init__(self, cfg: FusionConfig, image_channels: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.image_proj = Dense(image_channels, d)
        self.mask_tokens = nn.Parameter(torch.randn(cfg.n_mask_tokens, d) * 0.02)
        self.layers = nn.ModuleList(TwoWayBlock(cfg) for _ in range(cfg.n_layers))
        self.final_attn = GroupedQueryAttention(d, cfg.h_q, cfg.h_kv)
        self.final_norm = TokenNorm(d)

    def make_tokens(self, coarse: torch.Tensor, sparse: torch.Tensor, dense: torch.Tensor) -> TokenSet:
        """Queries are mask tokens then sparse prompts; keys are image features plus dense prompt."""
        b, _, h, w, d = coarse.shape
        if dense.shape[-3:] != coarse.shape[-3:]:
            raise ContractError(f"dense prompt grid {tuple(dense.shape[-3:])} != image grid {(h, w, d)}")
        image = self.image_proj(coarse.flatten(2).transpose(1, 2))
        image = image + dense.flatten(2).transpose(1, 2)
        queries = torch.cat([self.mask_tokens.unsqueeze(0).expand(b, -1, -1), sparse], dim=1)
        return TokenSet(queries, image, (h, w, d))

    def forward(self, tokens: TokenSet) -> tuple[torch.Tensor, torch.Tensor]:
        use_rope = self.cfg.rope == "linear"
        for layer in self.layers:
            tokens = two_way_block(layer, tokens, use_rope)
        q_pos, k_pos = tokens.positions() if use_rope else (None, None)
        queries = self.final_norm(
            tokens.queries + self.final_attn(tokens.queries, tokens.image_kv, q_pos, k_pos))
        return queries[:, 0], tokens.image_kv

    def specs(self, n_sparse: int, grid: tuple[int, int, int], name: str = "fusion") -> list[LayerSpec]:
        n_tok = math.prod(grid)
        n_q = self.cfg.n_mask_tokens + n_sparse
        out = [parameter_spec(self.mask_tokens, f"{name}.mask_tokens"),
               self.image_proj.spec(n_tok, f"{name}.image_proj")]
        for i, layer in enumerate(self.layers):
            out += layer.specs(n_q, n_tok, f"{name}.layers.{i}")
        out += [self.final_attn.spec(n_q, n_tok, f"{name}.final_attn"),
                self.final_norm.spec(n_q, f"{name}.final_norm")]
        return out

    def attention_modules(self) -> list[tuple[str, GroupedQueryAttention]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, GroupedQueryAttention)]
