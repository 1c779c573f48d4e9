"""Finite-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
import torch

from ..errors import EvaluationError


def _scalar(value: torch.Tensor) -> float:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not np.isfinite(v):
        raise EvaluationError(f"objective evaluated to {v}")
    return v


def _derivative(flat: torch.Tensor, i: int, h: float, evaluate: Callable[[], torch.Tensor]) -> float:
    """Fourth-order central difference of ``evaluate`` along ``flat[i]``."""
    orig = flat[i].item()
    vals = []
    for step in (h, -h, 2 * h, -2 * h):
        flat[i] = orig + step
        vals.append(_scalar(evaluate()))
    flat[i] = orig
    return (8 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12 * h)


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` maps a tensor to a scalar tensor.  When ``max_coords`` is given, only
    that many randomly chosen coordinates are perturbed.
    """
    x = x.detach().clone().to(torch.float64).requires_grad_(True)
    y = f(x)
    _scalar(y)
    (analytic,) = torch.autograd.grad(y, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)

    flat = x.detach().clone().reshape(-1)
    coords: Iterable[int] = range(flat.numel())
    if max_coords is not None and max_coords < flat.numel():
        rng = np.random.default_rng(seed)
        coords = rng.choice(flat.numel(), size=max_coords, replace=False)

    worst = 0.0
    with torch.no_grad():
        for i in coords:
            numeric = _derivative(flat, i, h, lambda: f(flat.view_as(x)))
            a = analytic[i].item()
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def grad_check_params(loss_fn: Callable[[], torch.Tensor], params: list[torch.nn.Parameter],
                      h: float = 1e-5, coords_per_param: int = 4, seed: int = 0) -> float:
    """Gradient check of a closure over every tensor in ``params``.

    Each parameter is perturbed in place at a few random coordinates; the
    parameters must already be float64.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    _scalar(loss)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = min(coords_per_param, flat.numel())
            for i in rng.choice(flat.numel(), size=n, replace=False):
                numeric = _derivative(flat, i, h, loss_fn)
                a = g.reshape(-1)[i].item()
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
