"""Sliding-window full-volume inference with Gaussian blending."""
from __future__ import annotations

import itertools

import numpy as np
import torch

from ..errors import ContractError


def gaussian_weights(patch) -> np.ndarray:
    """Separable Gaussian importance map, sigma = patch/8, centred at (p-1)/2."""
    axes = []
    for p in patch:
        i = np.arange(p, dtype=np.float64)
        sigma = p / 8.0
        axes.append(np.exp(-((i - (p - 1) / 2.0) ** 2) / (2 * sigma * sigma)))
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def window_starts(n: int, p: int, overlap: float) -> list[int]:
    if n <= p:
        return [0]
    step = max(1, int(round(p * (1.0 - overlap))))
    starts = list(range(0, n - p + 1, step))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def blend(shape, windows, patch) -> np.ndarray:
    """Weighted average of per-window probabilities.

    ``windows`` is an iterable of ``(start, probs)``; accumulation is a sum so
    the result does not depend on window order beyond float reassociation.
    """
    w = gaussian_weights(patch)
    acc = np.zeros(shape, dtype=np.float64)
    norm = np.zeros(shape, dtype=np.float64)
    for start, probs in windows:
        sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
        acc[sl] += w * probs
        norm[sl] += w
    if (norm <= 0).any():
        raise ContractError("windows do not cover the whole volume")
    return acc / norm


def sliding_window_infer(model, image: np.ndarray, text_vec: torch.Tensor, patch=(96, 96, 96),
                         overlap: float = 0.5, n_passes: int = 2, order=None) -> np.ndarray:
    """Probability map with the extents of ``image`` (``[1,H,W,D]`` or ``[H,W,D]``)."""
    if not 0.0 <= overlap < 1.0:
        raise ContractError(f"overlap must lie in [0, 1), got {overlap}")
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 4:
        img = img[0]
    patch = tuple(int(p) for p in patch)
    orig = img.shape
    need = [max(0, p - n) for p, n in zip(patch, orig)]
    lo = [n // 2 for n in need]
    img = np.pad(img, [(a, n - a) for a, n in zip(lo, need)])
    starts = list(itertools.product(*(window_starts(n, p, overlap) for n, p in zip(img.shape, patch))))
    if order is not None:
        starts = [starts[i] for i in order]
    dtype = next(model.parameters()).dtype
    t = text_vec.reshape(1, -1).to(dtype)

    def windows():
        with torch.no_grad():
            for s in starts:
                x = img[tuple(slice(a, a + p) for a, p in zip(s, patch))]
                logits = model.forward_refine(torch.from_numpy(np.ascontiguousarray(x))[None, None].to(dtype),
                                              t, n_passes)[0]
                yield s, torch.sigmoid(logits)[0, 0].double().numpy()

    was_training = model.training
    model.eval()
    try:
        out = blend(img.shape, windows(), patch)
    finally:
        model.train(was_training)
    crop = tuple(slice(a, a + n) for a, n in zip(lo, orig))
    return out[crop]
