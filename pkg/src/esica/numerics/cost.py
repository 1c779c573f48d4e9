"""Analytic parameter and FLOP accounting.

Convention: one multiply-accumulate (MAC) is two FLOPs.  Only MACs are
counted; softmax, activations, bias adds and rotary rotations are free.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

from ..errors import ConfigurationError

KINDS = (
    "dense_conv3d",
    "depthwise_axial_conv3d",
    "depthwise_full_conv3d",
    "linear",
    "attention",
    "norm",
    "resize",
    "parameter",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 1
    out_channels: int = 1
    kernel: tuple[int, int, int] = (1, 1, 1)
    input_extent: tuple[int, int, int] = (1, 1, 1)
    stride: int = 1
    # linear / attention / norm: number of token positions (queries for attention)
    tokens: int = 1
    kv_tokens: int = 1
    heads: int = 1
    kv_heads: int = 1
    output_extent: tuple[int, int, int] | None = None
    name: str = ""
    # a repeated execution of already-counted weights: flops only
    reuse: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigurationError(f"kernel extents must be odd and >= 1, got {self.kernel}")
        if self.kind.startswith("depthwise") and self.in_channels != self.out_channels:
            raise ConfigurationError("depthwise kinds require in_channels == out_channels")
        if self.kind == "depthwise_axial_conv3d" and sorted(self.kernel)[:2] != [1, 1]:
            raise ConfigurationError(f"axial kernel must be 1 on two axes, got {self.kernel}")
        if self.kind == "attention":
            if self.heads % self.kv_heads or self.in_channels % self.heads:
                raise ConfigurationError("attention needs heads % kv_heads == 0 and d % heads == 0")
        if self.kind == "resize" and self.output_extent is None:
            raise ConfigurationError("resize needs an output_extent")

    @property
    def out_extent(self) -> tuple[int, int, int]:
        if self.kind == "resize":
            return self.output_extent
        return tuple(math.ceil(n / self.stride) for n in self.input_extent)


@dataclass
class CostReport:
    params: int = 0
    flops: int = 0
    per_layer: list[tuple[LayerSpec, int, int]] = field(default_factory=list)

    def add(self, spec: LayerSpec) -> None:
        p, f = count_cost(spec)
        if spec.reuse:
            p = 0
        self.per_layer.append((spec, p, f))
        self.params += p
        self.flops += f

    def extend(self, specs: Iterable[LayerSpec]) -> "CostReport":
        for s in specs:
            self.add(s)
        return self

    def by_prefix(self, depth: int = 1) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for spec, p, f in self.per_layer:
            key = ".".join(spec.name.split(".")[:depth]) or "<unnamed>"
            row = out.setdefault(key, {"params": 0, "flops": 0})
            row["params"] += p
            row["flops"] += f
        return out

    def to_json(self) -> dict:
        return {
            "params": self.params,
            "flops": self.flops,
            "per_module": self.by_prefix(1),
            "per_layer": [
                {"name": s.name, "kind": s.kind, "params": p, "flops": f}
                for s, p, f in self.per_layer
            ],
        }


def reused(spec: LayerSpec) -> LayerSpec:
    return replace(spec, reuse=True)


def count_macs(spec: LayerSpec) -> int:
    k = spec.kind
    vol_out = math.prod(spec.out_extent)
    kvol = math.prod(spec.kernel)
    if k == "dense_conv3d":
        return spec.out_channels * spec.in_channels * kvol * vol_out
    if k in ("depthwise_axial_conv3d", "depthwise_full_conv3d"):
        return spec.in_channels * kvol * vol_out
    if k == "linear":
        return spec.tokens * spec.in_channels * spec.out_channels
    if k == "attention":
        d = spec.in_channels
        d_head = d // spec.heads
        kv_width = spec.kv_heads * d_head
        proj = 2 * spec.tokens * d * d + 2 * spec.kv_tokens * d * kv_width
        core = 2 * spec.heads * spec.tokens * spec.kv_tokens * d_head
        return proj + core
    if k == "norm":
        return 4 * spec.in_channels * spec.tokens
    if k == "resize":
        (h, w, d), (h2, w2, d2) = spec.input_extent, spec.output_extent
        macs = 0
        # separable passes: h, then w, then d; an unchanged axis is skipped
        if h2 != h:
            macs += 2 * h2 * w * d
        if w2 != w:
            macs += 2 * h2 * w2 * d
        if d2 != d:
            macs += 2 * h2 * w2 * d2
        return spec.in_channels * macs
    if k == "parameter":
        return 0
    raise ConfigurationError(f"unknown layer kind {k!r}")


def count_params(spec: LayerSpec) -> int:
    k = spec.kind
    kvol = math.prod(spec.kernel)
    if k == "dense_conv3d":
        return spec.out_channels * spec.in_channels * kvol + spec.out_channels
    if k in ("depthwise_axial_conv3d", "depthwise_full_conv3d"):
        return spec.in_channels * kvol + spec.in_channels
    if k == "linear":
        return spec.in_channels * spec.out_channels + spec.out_channels
    if k == "attention":
        d = spec.in_channels
        kv_width = spec.kv_heads * (d // spec.heads)
        return 2 * (d * d + d) + 2 * (d * kv_width + kv_width)
    if k == "norm":
        return 2 * spec.in_channels
    if k == "resize":
        return 0
    if k == "parameter":
        return spec.out_channels
    raise ConfigurationError(f"unknown layer kind {k!r}")


def count_cost(spec: LayerSpec) -> tuple[int, int]:
    """Return ``(params, flops)`` for one layer."""
    return count_params(spec), 2 * count_macs(spec)
