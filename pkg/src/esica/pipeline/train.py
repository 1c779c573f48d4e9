"""Two-stage curriculum training with momentum SGD and a warmup-cosine schedule."""
from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigurationError, TrainingError
from ..model import ESICA, ModelConfig
from ..text import ToyEmbedder
from .data import LabeledVolume, Sample, sample_patches
from .loss import dice_focal_loss

log = logging.getLogger(__name__)

STAGES = ("positive_only", "balanced")


@dataclass
class TrainConfig:
    stage: str = "positive_only"
    patch: tuple[int, int, int] = (96, 96, 96)
    n_passes: int = 2
    pos_per_instance: int = 2
    neg_per_instance: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 1
    max_steps: int | None = None
    warmup_ratio: float = 0.03
    grad_clip: float | None = 1.0
    freeze_text: bool = False
    fg_crop_ratio: float = 0.5
    lambda_focal: float = 1.0
    gamma: float = 2.0
    seed: int = 0
    dump_dir: str | None = None

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if self.stage not in STAGES:
            raise ConfigurationError(f"train.stage must be one of {STAGES}, got {self.stage!r}")
        if self.stage == "positive_only" and self.neg_per_instance != 0:
            raise ConfigurationError("train.neg_per_instance must be 0 in stage positive_only")
        if self.stage == "balanced" and not self.freeze_text:
            raise ConfigurationError("train.freeze_text must be true in stage balanced")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigurationError(f"train.patch must be three positive extents, got {self.patch}")
        if self.n_passes < 1:
            raise ConfigurationError("train.n_passes must be >= 1")
        if self.pos_per_instance < 0 or self.neg_per_instance < 0:
            raise ConfigurationError("sample quotas must be non-negative")
        if self.pos_per_instance + self.neg_per_instance == 0:
            raise ConfigurationError("at least one sample per instance is required")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("train.lr and train.weight_decay must be non-negative")
        if not 0.0 <= self.fg_crop_ratio <= 1.0:
            raise ConfigurationError("train.fg_crop_ratio must lie in [0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("train.grad_clip must be positive or null")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigurationError("train.warmup_ratio must lie in [0, 1)")
        if self.epochs < 1 and self.max_steps is None:
            raise ConfigurationError("train.epochs must be >= 1")

    @classmethod
    def stage1(cls, **kw) -> "TrainConfig":
        return cls(**{"stage": "positive_only", "pos_per_instance": 2, "neg_per_instance": 0,
                      "freeze_text": False, **kw})

    @classmethod
    def stage2(cls, **kw) -> "TrainConfig":
        return cls(**{"stage": "balanced", "pos_per_instance": 1, "neg_per_instance": 1,
                      "freeze_text": True, **kw})


@dataclass
class TrainResult:
    model: ESICA
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)

    def curve(self) -> dict:
        return {"step_loss": self.step_losses, "epoch_mean_loss": self.epoch_losses}


def warmup_cosine(step: int, total: int, warmup_ratio: float) -> float:
    """Learning-rate multiplier for 0-based ``step`` of ``total``."""
    warm = max(1, math.ceil(warmup_ratio * total)) if warmup_ratio > 0 else 0
    if step < warm:
        return (step + 1) / warm
    span = max(1, total - warm)
    return 0.5 * (1 + math.cos(math.pi * min(step - warm, span) / span))


def collate(samples: list[Sample], embedder, dtype=torch.float32):
    x = torch.from_numpy(np.stack([s.patch_image for s in samples])).to(dtype)
    y = torch.from_numpy(np.stack([s.target_mask for s in samples])[:, None]).to(dtype)
    t = torch.stack([embedder.embed(s.prompt).vector for s in samples]).to(dtype)
    return x, y, t


def multipass_loss(per_pass, target, cfg: TrainConfig) -> torch.Tensor:
    # every pass supervised with equal weight
    losses = [dice_focal_loss(lg, target, cfg.lambda_focal, cfg.gamma) for lg in per_pass]
    return sum(losses) / len(losses)


def _dump(batch, loss, step, cfg: TrainConfig) -> Path:
    root = Path(cfg.dump_dir) if cfg.dump_dir else Path(tempfile.mkdtemp(prefix="esica-nonfinite-"))
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"step_{step:06d}.npz"
    x, y, t = batch
    np.savez(path, image=x.numpy(), target=y.numpy(), text=t.numpy(), loss=np.array(float(loss)))
    return path


def _instances(data: list[LabeledVolume]) -> list[tuple[int, int]]:
    return [(i, c) for i, v in enumerate(data) for c in v.present_classes()]


def train(data: list[LabeledVolume], cfg: TrainConfig, init: ESICA | None = None,
          model_cfg: ModelConfig | None = None, embedder=None, on_step=None) -> TrainResult:
    """One curriculum stage.  Each optimizer step consumes the samples of one
    (volume, class) instance; an epoch visits every instance once in shuffled order."""
    if cfg.stage == "balanced" and init is None:
        raise ConfigurationError("stage balanced requires an init checkpoint from stage positive_only")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = init if init is not None else ESICA(model_cfg or ModelConfig())
    embedder = embedder or ToyEmbedder(model.cfg.d_text)
    dtype = next(model.parameters()).dtype
    model.train()

    frozen = {id(p) for p in model.text_parameters()} if cfg.freeze_text else set()
    for p in model.parameters():
        p.requires_grad_(id(p) not in frozen)
    params = [p for p in model.parameters() if id(p) not in frozen]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    inst = _instances(data)
    if not inst:
        raise ConfigurationError("training data contains no labelled instances")
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * len(inst)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: warmup_cosine(s, total, cfg.warmup_ratio))

    result = TrainResult(model)
    step, epoch_acc = 0, []
    while step < total:
        for j in rng.permutation(len(inst)):
            if step >= total:
                break
            vi, cls = inst[j]
            samples = sample_patches(data[vi], cfg, int(rng.integers(2 ** 31)), classes=[cls])
            batch = collate(samples, embedder, dtype)
            x, y, t = batch
            _, per_pass = model.forward_refine(x, t, cfg.n_passes)
            loss = multipass_loss(per_pass, y, cfg)
            if not torch.isfinite(loss):
                path = _dump(batch, loss.item(), step, cfg)
                raise TrainingError(f"non-finite loss {loss.item()} at step {step}; batch dumped to {path}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            sched.step()
            result.step_losses.append(loss.item())
            epoch_acc.append(loss.item())
            if on_step:
                on_step(step, loss.item())
            step += 1
        result.epoch_losses.append(float(np.mean(epoch_acc)))
        log.info("epoch %d mean loss %.4f", len(result.epoch_losses), result.epoch_losses[-1])
        epoch_acc = []
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return result
