"""Volumes, preprocessing, synthetic data and foreground-aware patch sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from ..errors import ContractError, GenerationError, InputError, SamplingError

FG_PAD = 8

# class id -> (shape, intensity, prompts); both prompts of a class share its shape word
SHAPES = {
    1: ("sphere", 0.95, ["bright sphere", "round sphere"]),
    2: ("cube", 0.75, ["solid cube", "gray cube"]),
    3: ("ellipsoid", 0.55, ["elongated ellipsoid", "dim ellipsoid"]),
    4: ("shell", 0.35, ["hollow shell", "thin shell"]),
}
BACKGROUND = 0.1


def class_prompts() -> dict[int, list[str]]:
    return {c: list(v[2]) for c, v in SHAPES.items()}


@dataclass
class LabeledVolume:
    image: np.ndarray                 # float32 [1, H, W, D]
    labels: np.ndarray                # int [H, W, D], 0 = background
    spacing: tuple[float, float, float]
    class_prompts: dict[int, list[str]] = field(default_factory=dict)
    instances: np.ndarray | None = None   # optional instance ids, same extents as labels
    name: str = ""
    fg_crop_skipped: bool = False

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[0] != 1:
            raise ContractError(f"image must be [1,H,W,D], got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ContractError(f"labels {self.labels.shape} do not match image {self.image.shape[1:]}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ContractError(f"spacing must be three positive values, got {self.spacing}")
        if self.instances is not None and self.instances.shape != self.labels.shape:
            raise ContractError("instance map must match the label extents")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def present_classes(self) -> list[int]:
        return [int(c) for c in np.unique(self.labels) if c != 0]


@dataclass
class Sample:
    patch_image: np.ndarray      # [1, P, P, P]
    target_mask: np.ndarray      # uint8 [P, P, P]
    prompt: str
    polarity: str                # "positive" | "negative"
    class_id: int
    fg_centered: bool = False

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise ContractError(f"polarity must be positive or negative, got {self.polarity!r}")
        if self.polarity == "positive" and not self.target_mask.any():
            raise ContractError("a positive sample needs a non-empty target")
        if self.polarity == "negative" and self.target_mask.any():
            raise ContractError("a negative sample must have an empty target")


# preprocessing ---------------------------------------------------------------

def resampled_extent(extent, spacing, target) -> tuple[int, int, int]:
    return tuple(max(1, math.ceil(n * s / t)) for n, s, t in zip(extent, spacing, target))


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, consistent with the trilinear convention
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    return np.clip(np.floor(src + 0.5), 0, n_in - 1).astype(np.int64)


def resample(vol: LabeledVolume, target_spacing) -> LabeledVolume:
    target_spacing = tuple(float(t) for t in target_spacing)
    new = resampled_extent(vol.shape, vol.spacing, target_spacing)
    if new == vol.shape:
        return replace(vol, spacing=target_spacing)
    img = F.interpolate(torch.from_numpy(np.ascontiguousarray(vol.image, dtype=np.float32))[None],
                        size=new, mode="trilinear", align_corners=False)[0].numpy()
    idx = np.ix_(*(_nearest_index(n, m) for n, m in zip(vol.shape, new)))
    inst = vol.instances[idx] if vol.instances is not None else None
    return replace(vol, image=img, labels=vol.labels[idx], instances=inst, spacing=target_spacing)


def foreground_bbox(labels: np.ndarray, pad: int = FG_PAD):
    nz = np.nonzero(labels)
    if len(nz[0]) == 0:
        return None
    return tuple(slice(max(0, int(a.min()) - pad), min(n, int(a.max()) + pad + 1))
                 for a, n in zip(nz, labels.shape))


def normalize(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if hi - lo < 1e-8:
        return np.zeros_like(image, dtype=np.float32)
    return ((image - lo) / (hi - lo)).astype(np.float32)


def preprocess(vol: LabeledVolume, target_spacing=(1.5, 1.5, 1.5),
               modality_skip_resample: bool = False) -> LabeledVolume:
    """Resample, crop to the padded foreground box and min-max normalize.

    An all-background volume is left uncropped and flagged via ``fg_crop_skipped``.
    """
    out = vol if modality_skip_resample else resample(vol, target_spacing)
    box = foreground_bbox(out.labels)
    if box is None:
        out = replace(out, fg_crop_skipped=True)
    else:
        inst = out.instances[box] if out.instances is not None else None
        out = replace(out, image=out.image[(slice(None), *box)], labels=out.labels[box], instances=inst)
    return replace(out, image=normalize(out.image))


# synthetic data --------------------------------------------------------------

def _grid(size):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in size), indexing="ij")


def _shape_mask(kind: str, size, center, r, rng) -> np.ndarray:
    hh, ww, dd = _grid(size)
    ch, cw, cd = center
    if kind == "sphere":
        return (hh - ch) ** 2 + (ww - cw) ** 2 + (dd - cd) ** 2 <= r * r
    if kind == "cube":
        half = r * 0.8
        return (np.abs(hh - ch) <= half) & (np.abs(ww - cw) <= half) & (np.abs(dd - cd) <= half)
    if kind == "ellipsoid":
        a = np.array([r, 0.6 * r, 0.45 * r])
        a = a[rng.permutation(3)]
        return ((hh - ch) / a[0]) ** 2 + ((ww - cw) / a[1]) ** 2 + ((dd - cd) / a[2]) ** 2 <= 1.0
    if kind == "shell":
        d2 = (hh - ch) ** 2 + (ww - cw) ** 2 + (dd - cd) ** 2
        return (d2 <= r * r) & (d2 >= (0.6 * r) ** 2)
    raise InputError(f"unknown primitive {kind!r}")


def _place(kind, size, occupied, rng, r_range, attempts):
    lo, hi = r_range
    for _ in range(attempts):
        r = rng.uniform(lo, hi)
        margin = int(math.ceil(r)) + 1
        if 2 * margin >= min(size):
            continue
        center = tuple(rng.uniform(margin, n - 1 - margin) for n in size)
        m = _shape_mask(kind, size, center, r, rng)
        # keep a one-voxel gap so objects never touch
        if not (ndimage.binary_dilation(m) & occupied).any():
            return m, r
    raise GenerationError(f"could not place a {kind} after {attempts} attempts in a {size} volume")


def synth_volume(rng: np.random.Generator, size=(48, 48, 48), n_objects=None,
                 multi_instance: bool = False, noise: float = 0.05, attempts: int = 100,
                 name: str = "") -> LabeledVolume:
    size = tuple(int(s) for s in size)
    if min(size) < 32:
        raise InputError(f"synthetic volumes need at least 32 voxels per axis, got {size}")
    labels = np.zeros(size, dtype=np.int64)
    instances = np.zeros(size, dtype=np.int64) if multi_instance else None
    image = np.full(size, BACKGROUND)
    r_hi = min(size) / 5
    occupied = np.zeros(size, dtype=bool)
    if multi_instance:
        plan = [1] * int(rng.integers(2, 6))
        r_range = (4.0, max(4.5, min(size) / 8))
    else:
        k = int(rng.integers(1, 4)) if n_objects is None else n_objects
        plan = sorted(rng.choice(list(SHAPES), size=k, replace=False).tolist())
        r_range = (min(size) / 8, r_hi)
    for i, cls in enumerate(plan):
        kind, inten, _ = SHAPES[cls]
        m, _ = _place(kind, size, occupied, rng, r_range, attempts)
        occupied |= m
        labels[m] = cls
        image[m] = inten
        if instances is not None:
            instances[m] = i + 1
    image = np.clip(image + rng.normal(0.0, noise, size), 0.0, 1.0).astype(np.float32)
    return LabeledVolume(image[None], labels, (1.5, 1.5, 1.5), class_prompts(), instances, name)


def synth_dataset(seed: int, n_volumes: int, size=48, multi_instance: bool = False,
                  n_objects=None) -> list[LabeledVolume]:
    """Deterministic synthetic dataset of 1-3 disjoint primitives per volume."""
    if isinstance(size, int):
        size = (size,) * 3
    rng = np.random.default_rng(seed)
    return [synth_volume(rng, size, n_objects, multi_instance, name=f"case_{i:04d}")
            for i in range(n_volumes)]


# patch sampling --------------------------------------------------------------

def pad_to(vol: LabeledVolume, patch) -> LabeledVolume:
    need = [max(0, p - n) for p, n in zip(patch, vol.shape)]
    if not any(need):
        return vol
    widths = [(n // 2, n - n // 2) for n in need]
    img = np.pad(vol.image, [(0, 0)] + widths)
    inst = np.pad(vol.instances, widths) if vol.instances is not None else None
    return replace(vol, image=img, labels=np.pad(vol.labels, widths), instances=inst)


def _crop_start(center, patch, shape):
    return tuple(int(min(max(c - p // 2, 0), n - p)) for c, p, n in zip(center, patch, shape))


def _crop(arr, start, patch):
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
    return arr[(..., *sl)]


class PatchSampler:
    """Draws crops, either centred on a random foreground voxel of a class or uniform."""

    def __init__(self, vol: LabeledVolume, patch, fg_crop_ratio: float, rng: np.random.Generator):
        self.vol = pad_to(vol, patch)
        self.patch = tuple(patch)
        self.ratio = fg_crop_ratio
        self.rng = rng

    def fg_start(self, cls):
        idx = np.argwhere(self.vol.labels == cls)
        if len(idx) == 0:
            raise SamplingError(f"class {cls} is absent from volume {self.vol.name or '<unnamed>'}")
        return _crop_start(idx[self.rng.integers(len(idx))], self.patch, self.vol.shape)

    def uniform_start(self):
        return tuple(int(self.rng.integers(0, n - p + 1)) for n, p in zip(self.vol.shape, self.patch))

    def draw(self, cls=None, require_present: bool = False, tries: int = 20):
        fg = cls is not None and self.rng.random() < self.ratio
        if fg:
            return self.fg_start(cls), True
        for _ in range(tries):
            start = self.uniform_start()
            if not require_present or (_crop(self.vol.labels, start, self.patch) == cls).any():
                return start, False
        return self.fg_start(cls), True

    def labels_at(self, start):
        return _crop(self.vol.labels, start, self.patch)

    def image_at(self, start):
        return np.ascontiguousarray(_crop(self.vol.image, start, self.patch))


def sample_patches(vol: LabeledVolume, cfg, rng_seed, classes=None) -> list[Sample]:
    """Positive and negative samples for every requested class of ``vol``.

    ``cfg`` supplies ``patch``, ``pos_per_instance``, ``neg_per_instance`` and
    ``fg_crop_ratio``.  ``classes`` defaults to every class present in the volume.
    """
    rng = np.random.default_rng(rng_seed)
    sampler = PatchSampler(vol, cfg.patch, cfg.fg_crop_ratio, rng)
    vocab = sorted(vol.class_prompts)
    classes = vol.present_classes() if classes is None else list(classes)
    out = []
    for cls in classes:
        if cls not in vol.class_prompts:
            raise SamplingError(f"class {cls} has no prompts")
        if not (sampler.vol.labels == cls).any():
            raise SamplingError(f"class {cls} is absent from volume {vol.name or '<unnamed>'}")
        for _ in range(cfg.pos_per_instance):
            start, fg = sampler.draw(cls, require_present=True)
            prompts = vol.class_prompts[cls]
            out.append(Sample(sampler.image_at(start), (sampler.labels_at(start) == cls).astype(np.uint8),
                              prompts[int(rng.integers(len(prompts)))], "positive", cls, fg))
        for _ in range(cfg.neg_per_instance):
            out.append(_negative(sampler, cls, vocab, rng))
    return out


def _negative(sampler: PatchSampler, cls, vocab, rng, tries: int = 20) -> Sample:
    for _ in range(tries):
        start, fg = sampler.draw(cls)
        present = set(np.unique(sampler.labels_at(start)).tolist())
        absent = [c for c in vocab if c not in present]
        if absent:
            neg = absent[int(rng.integers(len(absent)))]
            prompts = sampler.vol.class_prompts[neg]
            return Sample(sampler.image_at(start), np.zeros(sampler.patch, dtype=np.uint8),
                          prompts[int(rng.integers(len(prompts)))], "negative", neg, fg)
    raise SamplingError(f"no patch of {sampler.vol.name or '<unnamed>'} lacks a prompted class")
