"""Full text-guided segmentation model with multi-pass refinement."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .decoder import ConvHead, Decoder, DecoderConfig, SimilarityHead
from .encoder import Encoder, EncoderConfig
from .errors import ConfigurationError
from .fusion import FusionConfig, FusionTransformer, GroupedQueryAttention
from .layers import AxialConv, ChannelNorm, Conv3d, Dense, DepthwiseConv, Resize, TokenNorm
from .numerics.cost import CostReport, LayerSpec, count_cost, reused
from .prompt import PromptConfig, PromptEncoder


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    d_text: int = 64

    def __post_init__(self):
        if len(self.decoder.adapter_kernels) != self.encoder.n_levels:
            raise ConfigurationError(
                f"decoder.adapter_kernels needs {self.encoder.n_levels} entries (one per pyramid level), "
                f"got {len(self.decoder.adapter_kernels)}")
        if self.d_text < 1:
            raise ConfigurationError("d_text must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig(**d.get("encoder", {})),
            fusion=FusionConfig(**d.get("fusion", {})),
            decoder=DecoderConfig(**d.get("decoder", {})),
            prompt=PromptConfig(**d.get("prompt", {})),
            d_text=d.get("d_text", 64),
        )


def toy_config(**overrides) -> ModelConfig:
    """Small configuration for single-core CPU training experiments."""
    cfg = ModelConfig(
        encoder=EncoderConfig(stem_channels=8, stage_channels=[8, 16, 32], stage_depths=[1, 1, 1],
                              kernel=5, attn_heads=2),
        fusion=FusionConfig(d_model=48, n_layers=2, h_q=12, h_kv=4),
        decoder=DecoderConfig(hidden_dim=8, adapter_kernels=[5, 3, 3]),
        prompt=PromptConfig(mask_channels=4, mask_kernel=3),
        d_text=64,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


class ESICA(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        d_model = cfg.fusion.d_model
        self.encoder = Encoder(enc)
        self.prompt = PromptEncoder(cfg.prompt, cfg.d_text, d_model, enc.n_levels - 1)
        self.fusion = FusionTransformer(cfg.fusion, enc.stage_channels[-1])
        self.decoder = Decoder(cfg.decoder, list(enc.stage_channels), d_model)
        h = cfg.decoder.hidden_dim
        self.head = SimilarityHead(d_model, h) if cfg.decoder.head == "similarity" else ConvHead(h)
        self.ablate_feedback = False

    def text_parameters(self) -> list[nn.Parameter]:
        """Parameters on the text side of the model, frozen during fine-tuning."""
        return list(self.prompt.text_proj.parameters())

    def forward_refine(self, patch: torch.Tensor, text_vec: torch.Tensor, n_passes: int = 2):
        """Run ``n_passes`` of prediction, feeding each pass's logits back as a prompt.

        ``patch`` is ``[B, 1, H, W, D]`` and ``text_vec`` is ``[B, d_text]``.
        Returns ``(final_logits, per_pass_logits)``.
        """
        if n_passes < 1:
            raise ConfigurationError("n_passes must be >= 1")
        if patch.dim() == 4:
            patch = patch.unsqueeze(0)
        if text_vec.dim() == 1:
            text_vec = text_vec.unsqueeze(0)
        pyramid = self.encoder(patch)
        grid = tuple(pyramid.coarsest.shape[-3:])
        text_token = self.prompt.project_text(text_vec)
        state = self.prompt.build_initial(text_token, grid)
        per_pass = []
        for p in range(1, n_passes + 1):
            tokens = self.fusion.make_tokens(pyramid.coarsest, state.sparse, state.dense)
            mask_token, image_tokens = self.fusion(tokens)
            f_img = self.decoder(pyramid, image_tokens)
            logits = self.head(f_img, text_token)
            per_pass.append(logits)
            if p < n_passes:
                state = self.prompt.build_refined(text_token, logits, mask_token, grid, p + 1,
                                                  ablate=self.ablate_feedback)
        return per_pass[-1], per_pass

    def forward(self, patch, text_vec, n_passes: int = 2):
        return self.forward_refine(patch, text_vec, n_passes)[0]

    # cost accounting -------------------------------------------------------

    def cost_report(self, patch_extent, n_passes: int = 2) -> CostReport:
        """Analytic per-sample cost derived from the configuration alone."""
        patch_extent = tuple(patch_extent)
        self.encoder.check_extent(patch_extent)
        shapes = self.encoder.level_shapes(patch_extent)
        grid = shapes[-1][1]
        report = CostReport()
        report.extend(self.encoder.specs(patch_extent))
        report.extend(self.prompt.specs(patch_extent, n_passes))
        for p in range(1, n_passes + 1):
            n_sparse = 1 if p == 1 else 2
            specs = (self.fusion.specs(n_sparse, grid) + self.decoder.specs(shapes)
                     + self.head.specs(patch_extent))
            if p > 1:
                specs = [reused(s) for s in specs if s.kind != "parameter"]
            report.extend(specs)
        return report


_LEAVES = (Conv3d, AxialConv, DepthwiseConv, ChannelNorm, TokenNorm, Dense, Resize,
           GroupedQueryAttention, SimilarityHead)


def measure_cost(model: ESICA, patch_extent, n_passes: int = 2) -> CostReport:
    """Runtime cost: run a batch-1 forward pass and describe each executed leaf
    from the shapes it actually saw.  Params are the model's real tensor sizes."""
    inside_attention = {id(m) for a in model.modules() if isinstance(a, GroupedQueryAttention)
                        for m in a.modules() if m is not a}
    seen: list[LayerSpec] = []

    def hook(module, inputs, output):
        x = inputs[0]
        if isinstance(module, GroupedQueryAttention):
            seen.append(module.spec(inputs[0].shape[1], inputs[1].shape[1]))
        elif isinstance(module, SimilarityHead):
            c = inputs[0].shape[1]
            seen.append(LayerSpec("linear", c, 1, tokens=math.prod(inputs[0].shape[2:]), reuse=True))
        elif isinstance(module, (TokenNorm, Dense)):
            width = x.shape[-1]
            seen.append(module.spec(x.numel() // width))
        else:
            seen.append(module.spec(tuple(x.shape[-3:])))

    handles = []
    for m in model.modules():
        if isinstance(m, _LEAVES) and id(m) not in inside_attention:
            handles.append(m.register_forward_hook(hook))
    try:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            model.forward_refine(torch.zeros(1, 1, *patch_extent, dtype=dtype),
                                 torch.zeros(1, model.cfg.d_text, dtype=dtype), n_passes)
    finally:
        for h in handles:
            h.remove()
    report = CostReport()
    for s in seen:
        report.per_layer.append((s, 0, count_cost(s)[1]))
        report.flops += count_cost(s)[1]
    report.params = sum(p.numel() for p in model.parameters())
    return report
