from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import ContractError


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice per sample (leading axis), averaged over the batch."""
    if logits.shape != target.shape:
        raise ContractError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    p = torch.sigmoid(logits).flatten(1)
    t = target.to(p.dtype).flatten(1)
    dice = (2 * (p * t).sum(1) + smooth) / (p.sum(1) + t.sum(1) + smooth)
    return (1 - dice).mean()


def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    t = target.to(logits.dtype)
    # log p_t computed stably from the logits
    log_pt = t * F.logsigmoid(logits) + (1 - t) * F.logsigmoid(-logits)
    return (-(1 - log_pt.exp()) ** gamma * log_pt).mean()


def dice_focal_loss(logits: torch.Tensor, target: torch.Tensor, lambda_focal: float = 1.0,
                    gamma: float = 2.0) -> torch.Tensor:
    """Dice (smooth 1) plus ``lambda_focal`` times focal loss.

    Unbatched ``[1, H, W, D]`` or ``[H, W, D]`` inputs count as one sample.
    """
    if logits.shape != target.shape:
        raise ContractError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    if logits.dim() < 5:
        logits, target = logits.reshape(1, -1), target.reshape(1, -1)
    return dice_loss(logits, target) + lambda_focal * focal_loss(logits, target, gamma)
