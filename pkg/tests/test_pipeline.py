import copy
import importlib
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from esica.errors import ConfigurationError, ContractError, InputError, SamplingError, TrainingError
from esica.model import ESICA, toy_config
from esica.numerics import grad_check
from esica.pipeline import (
    LabeledVolume,
    PatchSampler,
    TrainConfig,
    blend,
    dice_focal_loss,
    gaussian_weights,
    preprocess,
    sample_patches,
    sliding_window_infer,
    synth_dataset,
    synth_volume,
    train,
    window_starts,
)
from esica.pipeline.data import _shape_mask, class_prompts, resampled_extent

train_mod = importlib.import_module("esica.pipeline.train")


def _vol(shape=(20, 20, 20), spacing=(1.5, 1.5, 1.5), seed=0):
    rng = np.random.default_rng(seed)
    labels = np.zeros(shape, dtype=np.int64)
    labels[5:12, 6:10, 4:9] = 1
    img = rng.random((1, *shape)).astype(np.float32) * 100
    return LabeledVolume(img, labels, spacing, class_prompts(), name="v")


# preprocessing ----------------------------------------------------------------

def test_preprocess_crops_padded_foreground_box():
    v = _vol()
    out = preprocess(v, modality_skip_resample=False)
    assert out.image.min() == 0.0 and out.image.max() == 1.0
    # crop box: foreground extent [5:12, 6:10, 4:9] padded by 8, clipped to the volume
    assert out.shape == (20, 18, 17)
    full = replace(v, labels=np.ones((20, 20, 20), dtype=np.int64))
    assert preprocess(full).shape == (20, 20, 20)


def test_preprocess_doubles_extent_from_coarse_spacing():
    v = _vol(shape=(9, 10, 11), spacing=(3.0, 3.0, 3.0))
    v = replace(v, labels=np.ones((9, 10, 11), dtype=np.int64))
    out = preprocess(v)
    assert out.shape == tuple(math.ceil(n * 3.0 / 1.5) for n in (9, 10, 11)) == (18, 20, 22)
    assert resampled_extent((7, 7, 7), (1.0, 1.0, 1.0), (1.5, 1.5, 1.5)) == (5, 5, 5)


def test_constant_image_normalizes_to_zero():
    v = _vol()
    v = replace(v, image=np.full_like(v.image, 7.0))
    assert not preprocess(v).image.any()


def test_empty_labels_skip_crop():
    v = replace(_vol(), labels=np.zeros((20, 20, 20), dtype=np.int64))
    out = preprocess(v)
    assert out.fg_crop_skipped and out.shape == (20, 20, 20)


# synthetic data ---------------------------------------------------------------

def test_synth_deterministic_and_disjoint():
    a, b = synth_dataset(3, 4, 32), synth_dataset(3, 4, 32)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.labels, y.labels)
    for v in a:
        assert 1 <= len(v.present_classes()) <= 3


def test_synth_too_small():
    with pytest.raises(InputError):
        synth_volume(np.random.default_rng(0), (16, 16, 16))


@pytest.mark.parametrize("r", [6.0, 7.5, 9.0])
def test_sphere_volume(r):
    m = _shape_mask("sphere", (32, 32, 32), (15.3, 16.1, 15.7), r, None)
    assert abs(m.sum() - 4 / 3 * math.pi * r ** 3) / (4 / 3 * math.pi * r ** 3) < 0.15


def test_multi_instance_volume():
    v = synth_volume(np.random.default_rng(1), (48, 48, 48), multi_instance=True)
    ids = set(np.unique(v.instances)) - {0}
    assert 2 <= len(ids) <= 5
    assert set(np.unique(v.labels[v.instances > 0])) == {1}


# sampling ---------------------------------------------------------------------

def test_positive_only_samples():
    v = synth_volume(np.random.default_rng(2), (32, 32, 32), n_objects=1)
    cfg = TrainConfig.stage1(patch=(16, 16, 16))
    samples = sample_patches(v, cfg, 5)
    assert len(samples) == 2
    assert all(s.polarity == "positive" and s.target_mask.any() for s in samples)
    again = sample_patches(v, cfg, 5)
    for s, t in zip(samples, again):
        assert np.array_equal(s.patch_image, t.patch_image) and s.prompt == t.prompt


def test_balanced_negative_is_absent_class():
    v = synth_volume(np.random.default_rng(3), (32, 32, 32), n_objects=2)
    cfg = TrainConfig.stage2(patch=(16, 16, 16))
    samples = sample_patches(v, cfg, 1)
    neg = [s for s in samples if s.polarity == "negative"]
    assert len(neg) == len(v.present_classes())
    for s in neg:
        assert not s.target_mask.any()
        assert s.prompt in class_prompts()[s.class_id]


def test_fg_crop_fraction():
    v = synth_volume(np.random.default_rng(4), (32, 32, 32), n_objects=1)
    cls = v.present_classes()[0]
    sampler = PatchSampler(v, (16, 16, 16), 0.5, np.random.default_rng(0))
    fg = sum(sampler.draw(cls)[1] for _ in range(1000))
    assert 0.45 <= fg / 1000 <= 0.55


def test_absent_class_raises():
    v = synth_volume(np.random.default_rng(5), (32, 32, 32), n_objects=1)
    missing = next(c for c in class_prompts() if c not in v.present_classes())
    with pytest.raises(SamplingError):
        sample_patches(v, TrainConfig.stage1(patch=(16, 16, 16)), 0, classes=[missing])


# loss -------------------------------------------------------------------------

def test_loss_limits():
    target = torch.zeros(1, 1, 4, 4, 4)
    target[..., 1:3, 1:3, 1:3] = 1
    perfect = torch.where(target > 0, 20.0, -20.0)
    assert dice_focal_loss(perfect, target) < 1e-3
    assert dice_focal_loss(torch.full((1, 1, 4, 4, 4), -20.0), torch.zeros(1, 1, 4, 4, 4)) < 1e-3


def test_loss_gradient(f64):
    torch.manual_seed(0)
    t = (torch.rand(1, 1, 4, 4, 4) > 0.5).double()
    assert grad_check(lambda x: dice_focal_loss(x, t), torch.randn(1, 1, 4, 4, 4)) < 1e-4


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        dice_focal_loss(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 1, 4, 4, 3))


def test_warmup_cosine_schedule():
    f = train_mod.warmup_cosine
    assert f(0, 100, 0.1) == pytest.approx(0.1)
    assert f(9, 100, 0.1) == pytest.approx(1.0)
    assert f(99, 100, 0.1) < 0.01


# training ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(11, 2, 32)


def test_lr_zero_keeps_weights(tiny_data):
    torch.manual_seed(0)
    model = ESICA(toy_config())
    before = copy.deepcopy(model.state_dict())
    cfg = TrainConfig.stage1(patch=(32, 32, 32), n_passes=1, lr=0.0, max_steps=2)
    res = train(tiny_data, cfg, init=model)
    assert len(res.step_losses) == 2
    assert all(torch.equal(before[k], v) for k, v in res.model.state_dict().items())


def test_stage2_freezes_text(tiny_data):
    torch.manual_seed(1)
    model = ESICA(toy_config())
    text = [p.detach().clone() for p in model.text_parameters()]
    other = model.decoder.token_proj.weight.detach().clone()
    cfg = TrainConfig.stage2(patch=(32, 32, 32), n_passes=1, max_steps=2)
    res = train(tiny_data, cfg, init=model)
    assert all(torch.equal(a, b) for a, b in zip(text, res.model.text_parameters()))
    assert not torch.equal(other, res.model.decoder.token_proj.weight)
    assert all(p.requires_grad for p in res.model.parameters())


def test_stage2_needs_init(tiny_data):
    with pytest.raises(ConfigurationError):
        train(tiny_data, TrainConfig.stage2(patch=(32, 32, 32)))


@pytest.mark.parametrize("kw", [
    {"stage": "positive_only", "neg_per_instance": 1},
    {"stage": "balanced", "freeze_text": False, "neg_per_instance": 1},
    {"stage": "nope"},
    {"fg_crop_ratio": 1.5},
])
def test_train_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_nonfinite_loss_dumps_batch(tiny_data, tmp_path):
    bad = [replace(tiny_data[0], image=np.full_like(tiny_data[0].image, np.nan))]
    cfg = TrainConfig.stage1(patch=(32, 32, 32), n_passes=1, max_steps=1, dump_dir=str(tmp_path))
    with pytest.raises(TrainingError, match=str(tmp_path)):
        train(bad, cfg, init=ESICA(toy_config()))
    assert list(tmp_path.glob("*.npz"))


def test_forward_refine_passes():
    torch.manual_seed(2)
    model = ESICA(toy_config()).eval()
    calls = []
    h = model.prompt.extractor.register_forward_hook(lambda *a: calls.append(1))
    x, t = torch.randn(1, 1, 16, 16, 16), torch.randn(1, 64)
    with torch.no_grad():
        final, per = model.forward_refine(x, t, 1)
        assert len(per) == 1 and not calls
        final, per = model.forward_refine(x, t, 2)
    h.remove()
    assert len(per) == 2 and calls
    assert all(p.shape == (1, 1, 16, 16, 16) and torch.isfinite(p).all() for p in per)


# inference --------------------------------------------------------------------

class _Stub(torch.nn.Module):
    """Returns the patch itself (or a constant) as logits."""

    def __init__(self, const=None):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))
        self.const = const

    def forward_refine(self, x, t, n_passes):
        y = x if self.const is None else torch.full_like(x, self.const)
        return y, [y]


def test_single_window_equals_patch():
    img = np.random.default_rng(0).normal(size=(1, 8, 8, 8)).astype(np.float32)
    out = sliding_window_infer(_Stub(), img, torch.zeros(4), patch=(8, 8, 8))
    np.testing.assert_allclose(out, 1 / (1 + np.exp(-img[0].astype(np.float64))), atol=1e-6)


def test_constant_windows_blend_to_constant():
    out = sliding_window_infer(_Stub(0.3), np.zeros((1, 20, 13, 9), np.float32), torch.zeros(4), patch=(8, 8, 8))
    assert out.shape == (20, 13, 9)
    np.testing.assert_allclose(out, 1 / (1 + np.exp(-0.3)), atol=1e-6)


def test_two_window_formula():
    patch = (4, 1, 1)
    w = gaussian_weights(patch)[:, 0, 0]
    out = blend((6, 1, 1), [((0, 0, 0), np.full(patch, 0.2)), ((2, 0, 0), np.full(patch, 0.8))], patch)
    probe = 3
    expect = (w[3] * 0.2 + w[1] * 0.8) / (w[3] + w[1])
    assert out[probe, 0, 0] == pytest.approx(expect, abs=1e-12)
    assert window_starts(6, 4, 0.5) == [0, 2]


def test_window_order_invariance():
    img = np.random.default_rng(1).normal(size=(1, 12, 12, 12)).astype(np.float32)
    a = sliding_window_infer(_Stub(), img, torch.zeros(4), patch=(8, 8, 8))
    n = len(window_starts(12, 8, 0.5)) ** 3
    b = sliding_window_infer(_Stub(), img, torch.zeros(4), patch=(8, 8, 8), order=list(reversed(range(n))))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_overlap_range():
    with pytest.raises(ContractError):
        sliding_window_infer(_Stub(), np.zeros((1, 8, 8, 8), np.float32), torch.zeros(4), (8, 8, 8), overlap=1.0)
