"""Reference numpy execution of every LayerSpec kind with a MAC counter.

This path shares no code with the torch ops or with ``count_cost``; it exists
to cross-check both.  Every vectorised product bumps the counter by the number
of scalar multiply-accumulates it performs.
"""
from __future__ import annotations

import math

import numpy as np

from .cost import LayerSpec


class MacCounter:
    def __init__(self):
        self.macs = 0

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.macs += a.shape[-2] * a.shape[-1] * b.shape[-1] * int(np.prod(a.shape[:-2], dtype=np.int64))
        return a @ b

    def scale(self, a: np.ndarray, s) -> np.ndarray:
        out = a * s
        self.macs += out.size
        return out


def _pad(x: np.ndarray, kernel) -> np.ndarray:
    p = [(0, 0)] + [(k // 2, k // 2) for k in kernel]
    return np.pad(x, p)


def dense_conv3d(x, weight, bias, stride, ctr: MacCounter):
    """x [C_in,H,W,D], weight [C_out,C_in,kh,kw,kd]."""
    c_out, c_in, kh, kw, kd = weight.shape
    _, h, w, d = x.shape
    ho, wo, do = (math.ceil(n / stride) for n in (h, w, d))
    xp = _pad(x, (kh, kw, kd))
    out = np.zeros((c_out, ho * wo * do))
    for a in range(kh):
        for b in range(kw):
            for c in range(kd):
                patch = xp[:, a:a + stride * ho:stride, b:b + stride * wo:stride, c:c + stride * do:stride]
                out += ctr.matmul(weight[:, :, a, b, c], patch.reshape(c_in, -1))
    out += bias[:, None]
    return out.reshape(c_out, ho, wo, do)


def depthwise_conv3d(x, weight, bias, ctr: MacCounter):
    """x [C,H,W,D], weight [C,kh,kw,kd]; axial kernels are the 1-on-two-axes case."""
    c, kh, kw, kd = weight.shape
    _, h, w, d = x.shape
    xp = _pad(x, (kh, kw, kd))
    out = np.zeros_like(x, dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            for e in range(kd):
                out += ctr.scale(xp[:, a:a + h, b:b + w, e:e + d], weight[:, a, b, e][:, None, None, None])
    return out + bias[:, None, None, None]


def linear(x, weight, bias, ctr: MacCounter):
    """x [n, in], weight [in, out]."""
    return ctr.matmul(x, weight) + bias


def attention(q_in, kv_in, p, heads, kv_heads, ctr: MacCounter):
    d = q_in.shape[1]
    dh = d // heads
    q = linear(q_in, p["wq"], p["bq"], ctr).reshape(-1, heads, dh).transpose(1, 0, 2)
    k = linear(kv_in, p["wk"], p["bk"], ctr).reshape(-1, kv_heads, dh).transpose(1, 0, 2)
    v = linear(kv_in, p["wv"], p["bv"], ctr).reshape(-1, kv_heads, dh).transpose(1, 0, 2)
    group = heads // kv_heads
    k = np.repeat(k, group, axis=0)
    v = np.repeat(v, group, axis=0)
    s = ctr.matmul(q, k.transpose(0, 2, 1)) / math.sqrt(dh)
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    s /= s.sum(axis=-1, keepdims=True)
    o = ctr.matmul(s, v).transpose(1, 0, 2).reshape(-1, d)
    return linear(o, p["wo"], p["bo"], ctr)


def norm(x, gamma, beta, ctr: MacCounter, eps=1e-5):
    """x [n, C]; normalises each row."""
    c = x.shape[1]
    ones = np.full((c, 1), 1.0 / c)
    mean = ctr.matmul(x, ones)
    cen = x - mean
    var = _sq_mean(cen, ctr)
    xhat = ctr.scale(cen, 1.0 / np.sqrt(var + eps))
    return ctr.scale(xhat, gamma) + beta


def _sq_mean(cen, ctr: MacCounter):
    # sum of squares as a row-wise dot product with itself: C MACs per row
    ctr.macs += cen.size
    return np.einsum("nc,nc->n", cen, cen)[:, None] / cen.shape[1]


def _resize_axis(x, axis, n_out, ctr: MacCounter):
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    shape = [1] * x.ndim
    shape[axis] = n_out
    a = np.take(x, lo, axis=axis)
    b = np.take(x, hi, axis=axis)
    return ctr.scale(a, (1 - frac).reshape(shape)) + ctr.scale(b, frac.reshape(shape))


def resize(x, target, ctr: MacCounter):
    for axis, n in zip((1, 2, 3), target):
        x = _resize_axis(x, axis, n, ctr)
    return x


def execute(spec: LayerSpec, rng: np.random.Generator) -> tuple[np.ndarray, int, dict]:
    """Run ``spec`` on random data; return (output, measured MACs, inputs/weights)."""
    ctr = MacCounter()
    s = spec
    if s.kind == "dense_conv3d":
        x = rng.standard_normal((s.in_channels, *s.input_extent))
        wt = rng.standard_normal((s.out_channels, s.in_channels, *s.kernel))
        b = rng.standard_normal(s.out_channels)
        y = dense_conv3d(x, wt, b, s.stride, ctr)
        return y, ctr.macs, {"x": x, "weight": wt, "bias": b}
    if s.kind in ("depthwise_axial_conv3d", "depthwise_full_conv3d"):
        x = rng.standard_normal((s.in_channels, *s.input_extent))
        wt = rng.standard_normal((s.in_channels, *s.kernel))
        b = rng.standard_normal(s.in_channels)
        y = depthwise_conv3d(x, wt, b, ctr)
        return y, ctr.macs, {"x": x, "weight": wt, "bias": b}
    if s.kind == "linear":
        x = rng.standard_normal((s.tokens, s.in_channels))
        wt = rng.standard_normal((s.in_channels, s.out_channels))
        b = rng.standard_normal(s.out_channels)
        return linear(x, wt, b, ctr), ctr.macs, {"x": x, "weight": wt, "bias": b}
    if s.kind == "attention":
        d = s.in_channels
        kvw = s.kv_heads * (d // s.heads)
        p = {
            "wq": rng.standard_normal((d, d)), "bq": rng.standard_normal(d),
            "wk": rng.standard_normal((d, kvw)), "bk": rng.standard_normal(kvw),
            "wv": rng.standard_normal((d, kvw)), "bv": rng.standard_normal(kvw),
            "wo": rng.standard_normal((d, d)), "bo": rng.standard_normal(d),
        }
        q = rng.standard_normal((s.tokens, d))
        kv = rng.standard_normal((s.kv_tokens, d))
        y = attention(q, kv, p, s.heads, s.kv_heads, ctr)
        return y, ctr.macs, {"q": q, "kv": kv, **p}
    if s.kind == "norm":
        x = rng.standard_normal((s.tokens, s.in_channels))
        g = rng.standard_normal(s.in_channels)
        b = rng.standard_normal(s.in_channels)
        return norm(x, g, b, ctr), ctr.macs, {"x": x, "gamma": g, "beta": b}
    if s.kind == "resize":
        x = rng.standard_normal((s.in_channels, *s.input_extent))
        return resize(x, s.output_extent, ctr), ctr.macs, {"x": x}
    if s.kind == "parameter":
        return rng.standard_normal(s.out_channels), 0, {}
    raise ValueError(s.kind)
