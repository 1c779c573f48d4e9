import pytest
import torch

from esica.errors import ConfigurationError
from esica.fusion import (
    FusionConfig,
    FusionTransformer,
    GroupedQueryAttention,
    TokenSet,
    TwoWayBlock,
    rope_apply,
    two_way_block,
)
from esica.numerics import grad_check_params
from esica.verify import HEAD_DIMS, _mha_reference


@pytest.mark.parametrize("d_head", HEAD_DIMS)
def test_rope_properties(f64, d_head):
    g = torch.Generator().manual_seed(d_head)
    x = torch.randn(6, d_head, generator=g)
    assert torch.equal(rope_apply(x, torch.zeros(6, dtype=torch.long)), x)
    pos = torch.randint(0, 10000, (6,), generator=g)
    assert (rope_apply(x, pos).norm(dim=1) - x.norm(dim=1)).abs().max() < 1e-6
    q, k = torch.randn(1, d_head, generator=g), torch.randn(1, d_head, generator=g)
    for m, n, s in ((3, 11, 5), (0, 200, 1000), (4000, 7, 17)):
        a = (rope_apply(q, torch.tensor([m])) * rope_apply(k, torch.tensor([n]))).sum()
        b = (rope_apply(q, torch.tensor([m + s])) * rope_apply(k, torch.tensor([n + s]))).sum()
        assert abs(a - b) < 1e-5


def test_rope_odd_dim():
    with pytest.raises(ConfigurationError):
        rope_apply(torch.zeros(2, 3), torch.tensor([0, 1]))


def test_gqa_full_groups_equals_mha(f64):
    torch.manual_seed(0)
    att = GroupedQueryAttention(24, 6, 6)
    q, kv = torch.randn(2, 4, 24), torch.randn(2, 7, 24)
    with torch.no_grad():
        assert (att(q, kv) - _mha_reference(att, q, kv)).abs().max() < 1e-12


def test_gqa_groups_share_kv(f64):
    """Grouped attention equals MHA whose K/V heads are repeated per group."""
    torch.manual_seed(1)
    gqa = GroupedQueryAttention(24, 6, 2)
    mha = GroupedQueryAttention(24, 6, 6)
    with torch.no_grad():
        mha.wq.load_state_dict(gqa.wq.state_dict())
        mha.wo.load_state_dict(gqa.wo.state_dict())
        for src, dst in ((gqa.wk, mha.wk), (gqa.wv, mha.wv)):
            dst.weight.copy_(src.weight.view(2, 4, 24).repeat_interleave(3, 0).reshape(24, 24))
            dst.bias.copy_(src.bias.view(2, 4).repeat_interleave(3, 0).reshape(24))
    q, kv = torch.randn(1, 3, 24), torch.randn(1, 5, 24)
    assert torch.allclose(gqa(q, kv), mha(q, kv), atol=1e-12)


def test_single_kv_token(f64):
    torch.manual_seed(2)
    att = GroupedQueryAttention(16, 4, 2)
    kv = torch.randn(1, 1, 16)
    out = att(torch.randn(1, 5, 16), kv)
    # every query sees the same single value vector
    assert torch.allclose(out, out[:, :1].expand_as(out), atol=1e-12)
    v = att.wv(kv).view(1, 1, 2, 4).repeat_interleave(2, dim=2).reshape(1, 1, 16)
    assert torch.allclose(out[:, 0], att.wo(v)[:, 0], atol=1e-12)


def test_attention_weights_sum_to_one():
    att = GroupedQueryAttention(16, 4, 1)
    att.record = True
    att(torch.randn(2, 3, 16), torch.randn(2, 9, 16))
    assert torch.allclose(att.last_weights.sum(-1), torch.ones(2, 4, 3))


def test_gqa_config_errors():
    with pytest.raises(ConfigurationError):
        GroupedQueryAttention(24, 6, 4)
    with pytest.raises(ConfigurationError):
        FusionConfig(d_model=48, h_q=5, h_kv=1)


def test_gqa_gradients(f64):
    torch.manual_seed(3)
    att = GroupedQueryAttention(8, 4, 2)
    q = torch.randn(1, 3, 8, requires_grad=True)
    kv = torch.randn(1, 5, 8, requires_grad=True)
    w = torch.randn(1, 3, 8)
    params = [q, kv, *att.parameters()]
    assert grad_check_params(lambda: (att(q, kv, torch.zeros(3, dtype=torch.long),
                                          torch.arange(5)) * w).sum(), params) < 1e-4


def _tokens(cfg, n_q=3, grid=(2, 3, 2), scale=1.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    n = grid[0] * grid[1] * grid[2]
    return TokenSet(torch.randn(1, n_q, cfg.d_model, generator=g) * scale,
                    torch.randn(1, n, cfg.d_model, generator=g) * scale, grid)


def test_two_way_zero_residuals():
    cfg = FusionConfig(d_model=16, n_layers=1, h_q=4, h_kv=2)
    blk = TwoWayBlock(cfg)
    with torch.no_grad():
        for lin in (blk.self_attn.wo, blk.cross_q2i.wo, blk.cross_i2q.wo, blk.mlp.fc2):
            lin.weight.zero_()
            lin.bias.zero_()
    t = _tokens(cfg)
    out = two_way_block(blk, t)
    assert torch.allclose(out.queries, blk.norm3(blk.norm2(blk.norm1(t.queries))))
    assert torch.allclose(out.image_kv, blk.norm4(t.image_kv))


def test_two_way_permutation_invariance(f64):
    torch.manual_seed(4)
    cfg = FusionConfig(d_model=16, n_layers=1, h_q=4, h_kv=2)
    blk = TwoWayBlock(cfg)
    t = _tokens(cfg)
    q_pos, k_pos = t.positions()
    perm = torch.randperm(t.image_kv.shape[1])
    qa, _ = blk(t.queries, t.image_kv, q_pos, k_pos)
    qb, kb = blk(t.queries, t.image_kv[:, perm], q_pos, k_pos[perm])
    assert (qa - qb).abs().max() < 1e-6


def test_two_way_stability():
    cfg = FusionConfig(d_model=16, n_layers=1, h_q=4, h_kv=2)
    blk = TwoWayBlock(cfg)
    for trial in range(100):
        t = _tokens(cfg, scale=10.0, seed=trial)
        t = TokenSet(t.queries.clamp(-10, 10), t.image_kv.clamp(-10, 10), t.token_grid)
        out = two_way_block(blk, t)
        assert torch.isfinite(out.queries).all() and torch.isfinite(out.image_kv).all()


def test_empty_stack_is_final_attention():
    cfg = FusionConfig(d_model=16, n_layers=0, h_q=4, h_kv=2)
    fus = FusionTransformer(cfg, 8)
    t = _tokens(cfg)
    mask_tok, img = fus(t)
    q_pos, k_pos = t.positions()
    ref = fus.final_norm(t.queries + fus.final_attn(t.queries, t.image_kv, q_pos, k_pos))
    assert torch.equal(mask_tok, ref[:, 0])
    assert torch.equal(img, t.image_kv)


def test_fusion_deterministic_and_shapes():
    cfg = FusionConfig(d_model=16, n_layers=2, h_q=4, h_kv=2)
    fus = FusionTransformer(cfg, 8).eval()
    coarse = torch.randn(2, 8, 2, 2, 2)
    tokens = fus.make_tokens(coarse, torch.randn(2, 1, 16), torch.randn(2, 16, 2, 2, 2))
    assert tokens.queries.shape == (2, 2, 16)
    a, b = fus(tokens), fus(tokens)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert a[0].shape == (2, 16) and a[1].shape == (2, 8, 16)
