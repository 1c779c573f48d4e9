"""Verification suites: finite-difference gradients, brute-force metric oracles
and the trend experiments.  Each suite yields :class:`Check` rows."""
from __future__ import annotations

import itertools
import time
from collections import deque
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import metrics
from .decoder import Adapter, ConvHead, Decoder, DecoderConfig, SimilarityHead
from .encoder import DCFormerV2Block, Encoder, EncoderConfig, TransformerLayer, block_count_channels
from .fusion import FusionConfig, FusionTransformer, GroupedQueryAttention, TwoWayBlock, rope_apply
from .model import ESICA, ModelConfig
from .numerics import ops
from .numerics.cost import LayerSpec, count_cost
from .numerics.instrumented import execute
from .numerics.gradcheck import grad_check, grad_check_params
from .pipeline.loss import dice_focal_loss
from .prompt import MaskFeatureExtractor, PromptConfig

GRAD_TOL = 1e-4


@dataclass
class Check:
    suite: str
    name: str
    value: float
    limit: float
    passed: bool
    seed: int | None = None


# gradient suite -------------------------------------------------------------------

def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(stem_channels=2, stage_channels=[2, 4], stage_depths=[1, 1], kernel=3,
                              attn_heads=2),
        fusion=FusionConfig(d_model=8, n_layers=1, h_q=2, h_kv=1),
        decoder=DecoderConfig(hidden_dim=2, adapter_kernels=[3, 3]),
        prompt=PromptConfig(mask_channels=2, mask_kernel=3),
        d_text=4,
    )


def _projected(fn, g):
    # contracting with a fixed random tensor avoids symmetric cancellations
    proj = {}

    def f(*args):
        y = fn(*args)
        if "w" not in proj:
            proj["w"] = torch.randn(y.shape, generator=g, dtype=torch.float64)
        return (y * proj["w"]).sum()
    return f


def _module_check(build, make_input, seed: int, coords: int = 24) -> float:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    module = build().double()
    x = make_input(g)
    f = _projected(module, g)
    err_x = grad_check(f, x, max_coords=coords, seed=seed)
    x0 = x.detach()
    err_p = grad_check_params(lambda: f(x0), list(module.parameters()), coords_per_param=3, seed=seed)
    return max(err_x, err_p)


def _rand(*shape):
    return lambda g: torch.randn(*shape, generator=g, dtype=torch.float64)


def _gradient_cases():
    """(name, callable(seed) -> max relative error)."""
    cases = []

    def op_case(name, fn, *shapes):
        def run(seed):
            g = torch.Generator().manual_seed(seed)
            args = [torch.randn(*s, generator=g, dtype=torch.float64) for s in shapes]
            worst = 0.0
            for i in range(len(args)):
                def f(z, i=i):
                    a = list(args)
                    a[i] = z
                    return fn(*a)
                worst = max(worst, grad_check(_projected(f, g), args[i], max_coords=32, seed=seed))
            return worst
        cases.append((name, run))

    op_case("conv3d", lambda x, w, b: ops.conv3d(x, w, b), (2, 4, 4, 4), (3, 2, 3, 3, 3), (3,))
    op_case("conv3d_stride2", lambda x, w: ops.conv3d(x, w, stride=2), (2, 5, 4, 3), (2, 2, 3, 3, 3))
    for ax in "hwd":
        op_case(f"depthwise_axial_{ax}", lambda x, w, ax=ax: ops.depthwise_axial_conv3d(x, ax, w),
                (3, 5, 4, 6), (3, 5))
    op_case("depthwise_full", lambda x, w, b: ops.depthwise_conv3d(x, w, b), (2, 4, 5, 3), (2, 3, 3, 3), (2,))
    op_case("trilinear_up", lambda x: ops.trilinear_resize(x, (6, 5, 4)), (2, 3, 3, 2))
    op_case("trilinear_down", lambda x: ops.trilinear_resize(x, (2, 3, 3)), (2, 5, 6, 4))
    op_case("channel_layer_norm", ops.channel_layer_norm, (4, 3, 3, 3), (4,), (4,))
    op_case("rope", lambda x: rope_apply(x, torch.arange(5) * 3), (2, 5, 6))
    op_case("similarity_mask", metrics_free_similarity, (4, 3, 3, 3), (4,))
    op_case("dice_focal_loss", lambda z: dice_focal_loss(z, (torch.arange(64).reshape(1, 1, 4, 4, 4) % 3 == 0)
                                                         .double()), (1, 1, 4, 4, 4))

    def mod_case(name, build, shape):
        cases.append((name, lambda seed: _module_check(build, _rand(*shape), seed)))

    mod_case("gqa_attention", lambda: _SelfAttn(GroupedQueryAttention(8, 4, 2)), (2, 5, 8))
    mod_case("dcformer_v2_block", lambda: DCFormerV2Block(3, 5), (2, 3, 4, 4, 4))
    mod_case("encoder_transformer_layer", lambda: TransformerLayer(4, 2), (1, 4, 2, 2, 2))
    mod_case("two_way_block", lambda: _TwoWay(TwoWayBlock(FusionConfig(8, 1, 2, 1))), (1, 11, 8))
    mod_case("adapter", lambda: Adapter(3, 2, 3), (1, 3, 4, 4, 4))
    mod_case("mask_feature_extractor", lambda: MaskFeatureExtractor(PromptConfig(2, 3), 1, 4), (1, 1, 4, 4, 4))
    mod_case("encoder", lambda: _EncoderSum(Encoder(tiny_model_config().encoder)), (1, 1, 4, 4, 4))
    mod_case("decoder+similarity_head", lambda: _DecodeHead(SimilarityHead(8, 2)), (1, 1, 4, 4, 4))
    mod_case("decoder+conv_head", lambda: _DecodeHead(ConvHead(2)), (1, 1, 4, 4, 4))
    mod_case("fusion_transformer", lambda: _Fusion(FusionTransformer(FusionConfig(8, 1, 2, 1), 4)), (1, 4, 2, 2, 2))
    mod_case("full_model_2pass", lambda: _FullModel(ESICA(tiny_model_config())), (1, 1, 4, 4, 4))
    return cases


def metrics_free_similarity(f_img, f_text):
    from .decoder import similarity_mask
    return similarity_mask(f_img, f_text)


class _SelfAttn(torch.nn.Module):
    def __init__(self, attn):
        super().__init__()
        self.attn = attn

    def forward(self, x):
        pos = torch.arange(x.shape[1])
        return self.attn(x, x, pos, pos)


class _TwoWay(torch.nn.Module):
    def __init__(self, block):
        super().__init__()
        self.block = block

    def forward(self, x):
        q, k = x[:, :3], x[:, 3:]
        qo, ko = self.block(q, k, torch.zeros(3, dtype=torch.long), torch.arange(k.shape[1]))
        return torch.cat([qo, ko], dim=1)


class _EncoderSum(torch.nn.Module):
    def __init__(self, enc):
        super().__init__()
        self.enc = enc

    def forward(self, x):
        return torch.cat([lvl.flatten() for lvl in self.enc(x).levels])


class _DecodeHead(torch.nn.Module):
    """Encoder features -> decoder -> head, with a learnable text token."""

    def __init__(self, head):
        super().__init__()
        self.enc = Encoder(EncoderConfig(stem_channels=2, stage_channels=[2, 4], stage_depths=[1, 1],
                                         kernel=3, attn_heads=2))
        self.dec = Decoder(DecoderConfig(hidden_dim=2, adapter_kernels=[3, 3]), [2, 4], 8)
        self.tokens = torch.nn.Parameter(torch.randn(1, 8, 8))
        self.text = torch.nn.Parameter(torch.randn(1, 8))
        self.head = head

    def forward(self, x):
        return self.head(self.dec(self.enc(x), self.tokens), self.text)


class _Fusion(torch.nn.Module):
    def __init__(self, fusion):
        super().__init__()
        self.fusion = fusion
        self.sparse = torch.nn.Parameter(torch.randn(1, 2, 8))
        self.dense = torch.nn.Parameter(torch.randn(1, 8, 2, 2, 2))

    def forward(self, x):
        q, img = self.fusion(self.fusion.make_tokens(x, self.sparse, self.dense))
        return torch.cat([q.flatten(), img.flatten()])


class _FullModel(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model
        self.text = torch.nn.Parameter(torch.randn(1, 4))

    def forward(self, x):
        target = (torch.arange(x[0, 0].numel()).reshape(x.shape) % 5 == 0).double()
        _, per_pass = self.model.forward_refine(x, self.text, 2)
        return torch.stack([dice_focal_loss(p, target) for p in per_pass])


def gradcheck_suite(seeds=(0, 1, 2)) -> list[Check]:
    out = []
    for name, run in _gradient_cases():
        for s in seeds:
            err = run(s)
            out.append(Check("gradcheck", name, err, GRAD_TOL, err < GRAD_TOL, s))
    return out


# brute-force oracles ----------------------------------------------------------------

def oracle_dsc(p: np.ndarray, g: np.ndarray) -> float:
    ps = {tuple(i) for i in np.argwhere(p)}
    gs = {tuple(i) for i in np.argwhere(g)}
    if not ps and not gs:
        return 1.0
    return 2 * len(ps & gs) / (len(ps) + len(gs))


_FACES = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def oracle_surface(m: np.ndarray) -> list[tuple[int, int, int]]:
    out = []
    for idx in np.argwhere(m):
        for off in _FACES:
            n = idx + off
            if (n < 0).any() or (n >= m.shape).any() or not m[tuple(n)]:
                out.append(tuple(idx))
                break
    return out


def oracle_nsd(p: np.ndarray, g: np.ndarray, spacing, tau: float, symmetric: bool = True) -> float:
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    sp = np.array(oracle_surface(p), dtype=float) * spacing
    sg = np.array(oracle_surface(g), dtype=float) * spacing
    d = np.sqrt(((sp[:, None, :] - sg[None, :, :]) ** 2).sum(-1))
    hit_p = int((d.min(1) <= tau).sum())
    if not symmetric:
        return hit_p / len(sp)
    hit_g = int((d.min(0) <= tau).sum())
    return (hit_p + hit_g) / (len(sp) + len(sg))


def oracle_components(m: np.ndarray, connectivity: int) -> set[frozenset]:
    if connectivity == 6:
        offs = _FACES
    else:
        offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    seen = np.zeros(m.shape, dtype=bool)
    comps = set()
    for start in map(tuple, np.argwhere(m)):
        if seen[start]:
            continue
        comp, queue = [], deque([start])
        seen[start] = True
        while queue:
            v = queue.popleft()
            comp.append(v)
            for o in offs:
                n = (v[0] + o[0], v[1] + o[1], v[2] + o[2])
                if all(0 <= n[k] < m.shape[k] for k in range(3)) and m[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        comps.add(frozenset(comp))
    return comps


def oracle_assignment_value(iou: np.ndarray) -> float:
    n_p, n_g = iou.shape
    n = max(n_p, n_g)
    pad = np.zeros((n, n))
    pad[:n_p, :n_g] = iou
    return max(sum(pad[i, perm[i]] for i in range(n)) for perm in itertools.permutations(range(n)))


def _partition(labels: np.ndarray, n: int) -> set[frozenset]:
    return {frozenset(map(tuple, np.argwhere(labels == k))) for k in range(1, n + 1)}


def oracle_suite(n: int = 200, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    worst_dsc = worst_nsd = worst_hung = 0.0
    cc_fail = 0
    for _ in range(n):
        shape = tuple(rng.integers(2, 9, 3))
        dens = rng.uniform(0.05, 0.6)
        p, g = rng.random(shape) < dens, rng.random(shape) < dens
        worst_dsc = max(worst_dsc, abs(metrics.dsc(p, g) - oracle_dsc(p, g)))
    for _ in range(n):
        spacing = tuple(rng.choice([0.5, 1.0, 1.5, 2.0], 3))
        p = metrics.BinaryMask(rng.random((12, 12, 12)) < rng.uniform(0.05, 0.5), spacing)
        g = metrics.BinaryMask(rng.random((12, 12, 12)) < rng.uniform(0.05, 0.5), spacing)
        tau = float(rng.uniform(0.5, 3.0))
        val = metrics.nsd(p, g, tau)
        worst_nsd = max(worst_nsd, abs(val - oracle_nsd(p.voxels, g.voxels, np.array(spacing), tau)))
    for i in range(n):
        m = rng.random((10, 10, 10)) < rng.uniform(0.05, 0.4)
        conn = 6 if i % 2 == 0 else 26
        labels, k = metrics.connected_components_3d(m, conn)
        if _partition(labels, k) != oracle_components(m, conn):
            cc_fail += 1
    for _ in range(n):
        shape = tuple(rng.integers(1, 7, 2))
        # dyadic entries keep every sum exact, so ties are real ties
        iou = rng.integers(0, int(rng.choice([4, 16, 64])) + 1, shape) / 64.0
        match = metrics.hungarian_match(iou, threshold=0.0)
        total = sum(v for _, _, v in match.pairs)
        worst_hung = max(worst_hung, abs(total - oracle_assignment_value(iou)))
    out.append(Check("oracles", "dsc", worst_dsc, 0.0, worst_dsc == 0.0))
    out.append(Check("oracles", "nsd", worst_nsd, 1e-9, worst_nsd < 1e-9))
    out.append(Check("oracles", "connected_components", float(cc_fail), 0.0, cc_fail == 0))
    out.append(Check("oracles", "hungarian", worst_hung, 0.0, worst_hung == 0.0))
    return out


# cost and attention suites ---------------------------------------------------------

def random_layer_spec(rng: np.random.Generator) -> LayerSpec:
    """A small random LayerSpec that the instrumented executor can run quickly."""
    kind = str(rng.choice(["dense_conv3d", "depthwise_axial_conv3d", "depthwise_full_conv3d",
                           "linear", "attention", "norm", "resize"]))
    ext = tuple(int(n) for n in rng.integers(2, 6, 3))
    c_in, c_out = (int(c) for c in rng.integers(1, 5, 2))
    if kind == "dense_conv3d":
        kern = tuple(int(k) for k in rng.choice([1, 3], 3))
        return LayerSpec(kind, c_in, c_out, kern, ext, stride=int(rng.integers(1, 3)))
    if kind == "depthwise_axial_conv3d":
        kern = [1, 1, 1]
        kern[int(rng.integers(3))] = int(rng.choice([3, 5]))
        return LayerSpec(kind, c_in, c_in, tuple(kern), ext)
    if kind == "depthwise_full_conv3d":
        return LayerSpec(kind, c_in, c_in, (3, 3, 3), ext)
    if kind == "linear":
        return LayerSpec(kind, c_in, c_out, tokens=int(rng.integers(1, 9)))
    if kind == "attention":
        kv = int(rng.choice([1, 2]))
        heads = kv * int(rng.choice([1, 2]))
        d = heads * 2 * int(rng.integers(1, 3))
        return LayerSpec(kind, d, d, tokens=int(rng.integers(1, 6)), kv_tokens=int(rng.integers(1, 9)),
                         heads=heads, kv_heads=kv)
    if kind == "norm":
        return LayerSpec(kind, c_in, c_in, tokens=int(rng.integers(1, 9)))
    target = tuple(int(n) for n in rng.integers(1, 7, 3))
    return LayerSpec(kind, c_in, c_in, input_extent=ext, output_extent=target)


def branch_delta(cfg: EncoderConfig | None = None) -> tuple[int, int]:
    """(measured, expected) encoder parameter gain from the depthwise 3x3x3 branch."""
    cfg = cfg or EncoderConfig()
    with_local = Encoder(replace(cfg, local_branch=True))
    without = Encoder(replace(cfg, local_branch=False))
    measured = (sum(p.numel() for p in with_local.parameters())
                - sum(p.numel() for p in without.parameters()))
    return measured, sum(28 * c for c in block_count_channels(cfg))


def cost_suite(n: int = 20, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        spec = random_layer_spec(rng)
        _, macs, _ = execute(spec, rng)
        if count_cost(spec)[1] != 2 * macs:
            bad += 1
    measured, expected = branch_delta()
    return [Check("cost", "instrumented_flops", float(bad), 0.0, bad == 0),
            Check("cost", "local_branch_delta", float(measured - expected), 0.0, measured == expected)]


def _mha_reference(att: GroupedQueryAttention, q_in, kv_in):
    d = att.d
    w_in = torch.cat([att.wq.weight, att.wk.weight, att.wv.weight])
    b_in = torch.cat([att.wq.bias, att.wk.bias, att.wv.bias])
    out, _ = torch.nn.functional.multi_head_attention_forward(
        q_in.transpose(0, 1), kv_in.transpose(0, 1), kv_in.transpose(0, 1), d, att.h_q,
        w_in, b_in, None, None, False, 0.0, att.wo.weight, att.wo.bias, training=False,
        need_weights=False)
    return out.transpose(0, 1)


HEAD_DIMS = (FusionConfig().d_head, 4, 8, 32, 64)


def attention_suite(seeds=(0, 1, 2)) -> list[Check]:
    out = []
    mha = norm_err = rel_err = 0.0
    for s in seeds:
        g = torch.Generator().manual_seed(s)
        for dh in HEAD_DIMS:
            heads = 4
            att = GroupedQueryAttention(dh * heads, heads, heads).double()
            q = torch.randn(2, 5, dh * heads, generator=g, dtype=torch.float64)
            kv = torch.randn(2, 9, dh * heads, generator=g, dtype=torch.float64)
            with torch.no_grad():
                mha = max(mha, (att(q, kv) - _mha_reference(att, q, kv)).abs().max().item())
            x = torch.randn(7, dh, generator=g, dtype=torch.float64)
            pos = torch.randint(0, 5000, (7,), generator=g)
            norm_err = max(norm_err, (rope_apply(x, pos).norm(dim=-1) - x.norm(dim=-1)).abs().max().item())
            qv = torch.randn(1, dh, generator=g, dtype=torch.float64)
            kv1 = torch.randn(1, dh, generator=g, dtype=torch.float64)
            m, n, shift = (torch.randint(0, 2000, (1,), generator=g) for _ in range(3))
            a = (rope_apply(qv, m) * rope_apply(kv1, n)).sum()
            b = (rope_apply(qv, m + shift) * rope_apply(kv1, n + shift)).sum()
            rel_err = max(rel_err, abs(a - b).item())
    out.append(Check("attention", "gqa_equals_mha", mha, 1e-6, mha < 1e-6))
    out.append(Check("attention", "rope_norm", norm_err, 1e-6, norm_err < 1e-6))
    out.append(Check("attention", "rope_relative", rel_err, 1e-5, rel_err < 1e-5))
    return out


# serialization suite -----------------------------------------------------------------

def _corruptions(buf: bytes, rng: np.random.Generator) -> list[bytes]:
    cut = int(rng.integers(1, len(buf)))
    # a text table cut exactly at a line end is a valid shorter table
    while buf[cut - 1:cut] == b"\n":
        cut -= 1
    return [b"XXXX" + buf[4:], buf[:cut], buf + b"\0", b"", buf[:3]]


def serialization_suite(n: int = 20, seed: int = 0) -> list[Check]:
    """Byte-exact round trips of the three formats and typed errors on damaged input."""
    import tempfile
    from pathlib import Path

    from . import io, text
    from .errors import FormatError

    rng = np.random.default_rng(seed)
    exact = {"esv1": True, "esck": True, "esica_emb": True}
    untyped = 0

    def damaged(decode, buf):
        nonlocal untyped
        for bad in _corruptions(buf, rng):
            try:
                decode(bad)
            except FormatError:
                continue
            except Exception:  # noqa: BLE001 - any other exception is a crash
                untyped += 1
            else:
                untyped += 1

    with tempfile.TemporaryDirectory() as tmp:
        for i in range(n):
            shape = tuple(int(s) for s in rng.integers(1, 9, 3))
            spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.5, 2.5], 3))
            arr = (rng.standard_normal(shape).astype(np.float32) if i % 2 == 0
                   else rng.integers(0, 6, shape))
            buf = io.encode_volume(arr, spacing)
            back, sp = io.decode_volume(buf)
            exact["esv1"] &= io.encode_volume(back if i % 2 == 0 else back.astype(np.uint16), sp) == buf
            damaged(io.decode_volume, buf)

            tensors = {f"t{j}": torch.randn(tuple(rng.integers(1, 4, int(rng.integers(0, 4))).tolist()),
                                            dtype=torch.float64 if j % 2 else torch.float32)
                       for j in range(int(rng.integers(1, 5)))}
            buf = io.encode_checkpoint(tensors, {"step": i, "tag": "x"})
            t2, meta = io.decode_checkpoint(buf)
            exact["esck"] &= io.encode_checkpoint(t2, meta) == buf
            damaged(io.decode_checkpoint, buf)

            path = Path(tmp) / f"emb{i}.txt"
            width = int(rng.integers(1, 9))
            text.dump_table({f"prompt {k}": rng.standard_normal(width) for k in range(3)}, path)
            raw = path.read_bytes()
            table = text.load_table(path)
            text.dump_table({k: e.vector for k, e in table.items()}, path)
            exact["esica_emb"] &= path.read_bytes() == raw

            def load_bytes(b, _p=Path(tmp) / "bad.txt"):
                _p.write_bytes(b)
                return text.load_table(_p)
            damaged(load_bytes, raw)
    out = [Check("serialization", f"{k}_round_trip", float(not v), 0.0, v) for k, v in exact.items()]
    out.append(Check("serialization", "typed_errors", float(untyped), 0.0, untyped == 0))
    return out


# trend suite ----------------------------------------------------------------------

def trends_suite(quick: bool = False) -> list[Check]:
    from . import experiments as ex

    seeds = (0, 1) if quick else (0, 1, 2, 3, 4)
    out = []
    ref = ex.refinement_trend(seeds=seeds, steps=40 if quick else 150, keep_models=True)
    out.append(Check("trends", "refinement_improvement", ref["improvement"], 0.02, ref["improvement"] > 0.02))
    s1 = {s: m for (s, n), m in ref["models"].items() if n == 2}
    cur = ex.curriculum_trend(s1, seeds=seeds, steps2=20 if quick else 60)
    out.append(Check("trends", "curriculum_fp_drop", cur["fp_relative_drop"], 0.3, cur["fp_relative_drop"] >= 0.3))
    drop = cur["dice_stage1"] - cur["dice_stage2"]
    out.append(Check("trends", "curriculum_dice_loss", drop, 0.05, drop < 0.05))
    conv = ex.convergence(seeds=(0,) if quick else (0, 1, 2), steps=60 if quick else 200)
    worst = max(r["ratio"] for r in conv["rows"])
    out.append(Check("trends", "convergence_ratio", worst, 0.5, worst <= 0.5))
    return out


SUITES = {"gradcheck": gradcheck_suite, "oracles": oracle_suite, "cost": cost_suite,
          "attention": attention_suite, "serialization": serialization_suite,
          "trends": trends_suite}


def run_suite(name: str) -> tuple[list[Check], float]:
    t0 = time.time()
    checks = SUITES[name]()
    return checks, time.time() - t0

