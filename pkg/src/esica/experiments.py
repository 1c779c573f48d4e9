"""Desk-scale trend experiments on synthetic data (refinement, curriculum,
similarity head, convergence).  Each returns plain dicts so the acceptance
suite and the CLI can share them."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import replace

import numpy as np
import torch

from .metrics import dsc
from .model import ESICA, ModelConfig, toy_config
from .pipeline.data import LabeledVolume, synth_dataset, synth_volume
from .pipeline.infer import sliding_window_infer
from .pipeline.train import TrainConfig, train
from .text import ToyEmbedder

log = logging.getLogger(__name__)

LR = 0.01


def predict(model: ESICA, vol: LabeledVolume, prompt: str, patch, n_passes: int, embedder) -> np.ndarray:
    prob = sliding_window_infer(model, vol.image, embedder.embed(prompt).vector, patch,
                                n_passes=n_passes)
    return prob >= 0.5


def positive_dice(model, vols, patch, n_passes, embedder) -> float:
    scores = []
    for v in vols:
        for c in v.present_classes():
            pred = predict(model, v, v.class_prompts[c][0], patch, n_passes, embedder)
            scores.append(dsc(pred, v.labels == c))
    return float(np.mean(scores))


def negative_fp_fraction(model, vols, patch, n_passes, embedder) -> float:
    """Mean fraction of voxels predicted foreground for prompts of absent classes."""
    fr = []
    for v in vols:
        present = set(v.present_classes())
        for c in sorted(v.class_prompts):
            if c not in present:
                fr.append(predict(model, v, v.class_prompts[c][0], patch, n_passes, embedder).mean())
    return float(np.mean(fr)) if fr else 0.0


def _split(seed, size, n_train=40, n_val=10):
    data = synth_dataset(seed, n_train + n_val, size)
    return data[:n_train], data[n_train:]


def refinement_trend(seeds=(0, 1, 2, 3, 4), size=48, steps=150, model_cfg: ModelConfig | None = None,
                     lr: float = LR, keep_models: bool = False) -> dict:
    """Paired 1-pass vs 2-pass training; both runs share data and initial weights."""
    model_cfg = model_cfg or toy_config()
    emb = ToyEmbedder(model_cfg.d_text)
    patch = (size,) * 3
    rows, models = [], {}
    t0 = time.time()
    for s in seeds:
        tr, va = _split(1000 + s, size)
        row = {"seed": s}
        for n in (1, 2):
            torch.manual_seed(s)
            init = ESICA(model_cfg)
            cfg = TrainConfig.stage1(patch=patch, n_passes=n, lr=lr, max_steps=steps, seed=s)
            res = train(tr, cfg, init=init, embedder=emb)
            row[f"dice_{n}pass"] = positive_dice(res.model, va, patch, n, emb)
            row[f"final_loss_{n}pass"] = float(np.mean(res.step_losses[-20:]))
            if keep_models:
                models[(s, n)] = res.model
        log.info("refinement seed %d: %s", s, row)
        rows.append(row)
    d1 = np.array([r["dice_1pass"] for r in rows])
    d2 = np.array([r["dice_2pass"] for r in rows])
    out = {"rows": rows, "mean_1pass": float(d1.mean()), "mean_2pass": float(d2.mean()),
           "improvement": float((d2 - d1).mean()), "seconds": time.time() - t0}
    if keep_models:
        out["models"] = models
    return out


def curriculum_trend(stage1_models: dict | None = None, seeds=(0, 1, 2, 3, 4), size=48, steps1=150,
                     steps2=60, model_cfg: ModelConfig | None = None, lr: float = LR) -> dict:
    """Stage-1 checkpoint vs the same checkpoint after balanced fine-tuning."""
    model_cfg = model_cfg or toy_config()
    emb = ToyEmbedder(model_cfg.d_text)
    patch = (size,) * 3
    rows = []
    t0 = time.time()
    for s in seeds:
        tr, va = _split(1000 + s, size)
        if stage1_models and s in stage1_models:
            m1 = stage1_models[s]
        else:
            torch.manual_seed(s)
            cfg1 = TrainConfig.stage1(patch=patch, lr=lr, max_steps=steps1, seed=s)
            m1 = train(tr, cfg1, init=ESICA(model_cfg), embedder=emb).model
        cfg2 = TrainConfig.stage2(patch=patch, lr=lr, max_steps=steps2, seed=s + 100)
        text_before = [p.detach().clone() for p in m1.text_parameters()]
        m2 = train(tr, cfg2, init=copy.deepcopy(m1), embedder=emb).model
        row = {
            "seed": s,
            "fp_stage1": negative_fp_fraction(m1, va, patch, 2, emb),
            "fp_stage2": negative_fp_fraction(m2, va, patch, 2, emb),
            "dice_stage1": positive_dice(m1, va, patch, 2, emb),
            "dice_stage2": positive_dice(m2, va, patch, 2, emb),
            "text_frozen": all(torch.equal(a, b) for a, b in zip(text_before, m2.text_parameters())),
        }
        log.info("curriculum seed %d: %s", s, row)
        rows.append(row)
    fp1 = float(np.mean([r["fp_stage1"] for r in rows]))
    fp2 = float(np.mean([r["fp_stage2"] for r in rows]))
    return {"rows": rows, "fp_stage1": fp1, "fp_stage2": fp2,
            "fp_relative_drop": (fp1 - fp2) / fp1 if fp1 > 0 else 0.0,
            "dice_stage1": float(np.mean([r["dice_stage1"] for r in rows])),
            "dice_stage2": float(np.mean([r["dice_stage2"] for r in rows])),
            "seconds": time.time() - t0}


def convergence(seeds=(0, 1, 2), size=32, steps=200, model_cfg: ModelConfig | None = None,
                lr: float = LR, window: int = 20, keep_models: bool = False) -> dict:
    """Stage-1 loss: step-1 value vs the mean of the last ``window`` steps."""
    model_cfg = model_cfg or toy_config()
    rows, models = [], {}
    t0 = time.time()
    for s in seeds:
        data = synth_dataset(2000 + s, 40, size)
        torch.manual_seed(s)
        cfg = TrainConfig.stage1(patch=(size,) * 3, lr=lr, max_steps=steps, seed=s)
        res = train(data, cfg, init=ESICA(model_cfg))
        first, last = res.step_losses[0], float(np.mean(res.step_losses[-window:]))
        rows.append({"seed": s, "first": first, "final": last, "ratio": last / first})
        if keep_models:
            models[s] = res.model
    out = {"rows": rows, "seconds": time.time() - t0}
    if keep_models:
        out["models"] = models
    return out


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    u = (a | b).sum()
    return 1.0 if u == 0 else float((a & b).sum() / u)


def head_discrimination(size=32, steps=200, seed=0, model_cfg: ModelConfig | None = None,
                        lr: float = LR, similarity_model: ESICA | None = None) -> dict:
    """Masks for two prompts on one two-class volume: similarity head vs conv-head ablation."""
    model_cfg = model_cfg or toy_config()
    emb = ToyEmbedder(model_cfg.d_text)
    patch = (size,) * 3
    data = synth_dataset(2000 + seed, 40, size)
    vol = synth_volume(np.random.default_rng(7), (size,) * 3, n_objects=2, name="two_class")
    a, b = vol.present_classes()
    out = {"classes": [a, b]}
    for head in ("similarity", "conv"):
        if head == "similarity" and similarity_model is not None:
            model = similarity_model
        else:
            cfg = replace(model_cfg, decoder=replace(model_cfg.decoder, head=head))
            torch.manual_seed(seed)
            tc = TrainConfig.stage1(patch=patch, lr=lr, max_steps=steps, seed=seed)
            model = train(data, tc, init=ESICA(cfg), embedder=emb).model
        ma = predict(model, vol, vol.class_prompts[a][0], patch, 2, emb)
        mb = predict(model, vol, vol.class_prompts[b][0], patch, 2, emb)
        out[head] = {"iou": _iou(ma, mb), "identical": bool(np.array_equal(ma, mb)),
                     "dice_a": dsc(ma, vol.labels == a), "dice_b": dsc(mb, vol.labels == b)}
    return out
