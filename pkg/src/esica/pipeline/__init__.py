from .data import (LabeledVolume, PatchSampler, Sample, class_prompts, preprocess, resampled_extent,
                   sample_patches, synth_dataset, synth_volume)
from .infer import blend, gaussian_weights, sliding_window_infer, window_starts
from .loss import dice_focal_loss
from .train import TrainConfig, TrainResult, train, warmup_cosine

__all__ = [
    "LabeledVolume", "PatchSampler", "Sample", "class_prompts", "preprocess", "resampled_extent",
    "sample_patches", "synth_dataset", "synth_volume", "blend", "gaussian_weights",
    "sliding_window_infer", "window_starts", "dice_focal_loss", "TrainConfig", "TrainResult",
    "train", "warmup_cosine",
]
