import pytest
import torch

from esica.errors import ContractError
from esica.model import ESICA, toy_config
from esica.numerics import grad_check
from esica.prompt import MaskFeatureExtractor, PromptConfig, PromptEncoder, PromptState, n_downsamplings
from esica.text import embed_toy


@pytest.fixture
def enc():
    torch.manual_seed(0)
    return PromptEncoder(PromptConfig(mask_channels=4, mask_kernel=3), d_text=64, d_model=16, n_down=2).eval()


def _text(enc, prompt):
    return enc.project_text(embed_toy(prompt).vector.float().unsqueeze(0))


def test_initial_state(enc):
    a = enc.build_initial(_text(enc, "liver"), (4, 4, 4))
    b = enc.build_initial(_text(enc, "spleen"), (4, 4, 4))
    assert torch.equal(a.dense, b.dense)
    assert not torch.equal(a.sparse, b.sparse)
    assert a.sparse.shape[1] == 1 and a.iteration == 1
    c = enc.build_initial(_text(enc, "liver"), (4, 4, 4))
    assert torch.equal(a.sparse, c.sparse) and torch.equal(a.dense, c.dense)


def test_refined_state_from_zero_mask(enc):
    t = _text(enc, "liver")
    tok = torch.randn(1, 16)
    z = torch.zeros(1, 1, 16, 16, 16)
    s1 = enc.build_refined(t, z, tok, (4, 4, 4))
    s2 = enc.build_refined(t, z, tok, (4, 4, 4))
    assert torch.equal(s1.dense, enc.extractor(z))
    assert torch.equal(s1.dense, s2.dense)
    assert s1.sparse.shape[1] == 2 and s1.iteration == 2


def test_refined_grid_mismatch(enc):
    with pytest.raises(ContractError):
        enc.build_refined(_text(enc, "a"), torch.zeros(1, 1, 16, 16, 16), torch.zeros(1, 16), (8, 8, 8))


def test_state_token_count_contract():
    with pytest.raises(ContractError):
        PromptState(torch.zeros(1, 2, 4), torch.zeros(1, 4, 1, 1, 1), 1)


def test_translation_moves_dense_interior(enc):
    blob = torch.zeros(1, 1, 32, 32, 32)
    blob[..., 12:18, 13:17, 14:18] = 3.0
    moved = torch.roll(blob, 4, dims=2)
    a = enc.extractor(blob)
    b = enc.extractor(moved)
    # one grid cell per 4 voxels; compare away from the zero-padded border
    assert torch.allclose(b[..., 3:7, 2:6, 2:6], a[..., 2:6, 2:6, 2:6], atol=1e-5)


def test_extractor_gradient(f64):
    torch.manual_seed(1)
    ext = MaskFeatureExtractor(PromptConfig(mask_channels=2, mask_kernel=3), 1, 4).double()
    proj = torch.randn(1, 4, 2, 2, 2)
    x = torch.randn(1, 1, 4, 4, 4)
    assert grad_check(lambda v: (ext(v) * proj).sum(), x) < 1e-4


def test_gradient_reaches_extractor_through_second_pass():
    torch.manual_seed(2)
    model = ESICA(toy_config())
    x = torch.randn(1, 1, 16, 16, 16)
    t = embed_toy("liver").vector.float()
    _, per_pass = model.forward_refine(x, t, 2)
    per_pass[-1].square().mean().backward()
    assert model.prompt.extractor.lift.weight.grad.norm() > 0
    assert model.encoder.stem_proj.weight.grad.norm() > 0


def test_n_downsamplings():
    assert n_downsamplings((32, 32, 32), (8, 8, 8)) == 2
