"""Run configuration: one YAML file with nested sections, full defaulting and
field-level validation.  ``--set section.key=value`` overrides apply on top."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigurationError
from .fusion import FusionConfig
from .model import ModelConfig, toy_config
from .pipeline.train import TrainConfig
from .prompt import PromptConfig


@dataclass
class EmbeddingConfig:
    kind: str = "toy"          # toy | table
    path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("toy", "table"):
            raise ConfigurationError(f"embedding.kind must be 'toy' or 'table', got {self.kind!r}")
        if self.kind == "table" and not self.path:
            raise ConfigurationError("embedding.path is required when embedding.kind is 'table'")


@dataclass
class InferConfig:
    patch: tuple[int, int, int] = (96, 96, 96)
    overlap: float = 0.5
    n_passes: int = 2
    threshold: float = 0.5
    target_spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigurationError(f"infer.overlap must lie in [0, 1), got {self.overlap}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("infer.threshold must lie in (0, 1)")


@dataclass
class EvalConfig:
    tau_mm: float = 2.0
    symmetric_nsd: bool = True
    instances: bool = False


@dataclass
class PathConfig:
    data_dir: str | None = None
    out_dir: str = "runs"


@dataclass
class RunConfig:
    preset: str = "desk"          # desk | toy: base model before overrides
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)


_MODEL_SECTIONS = {"encoder": EncoderConfig, "fusion": FusionConfig, "decoder": DecoderConfig,
                   "prompt": PromptConfig}
_SECTIONS = {"train": TrainConfig, "embedding": EmbeddingConfig, "infer": InferConfig,
             "eval": EvalConfig, "paths": PathConfig}


def _build(cls, base, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {', '.join(unknown)}")
    merged = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    merged.update(values)
    try:
        return cls(**merged)
    except ConfigurationError as e:
        raise ConfigurationError(f"{where}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{where}: invalid value ({e})") from e


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {dotted!r}: {k} is not a section")
    node[keys[-1]] = value


def parse_overrides(items) -> dict:
    tree: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    return tree


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def from_dict(tree: dict | None) -> RunConfig:
    tree = dict(tree or {})
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(tree) - top)
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s) {', '.join(unknown)}")
    preset = tree.get("preset", "desk")
    if preset not in ("desk", "toy"):
        raise ConfigurationError(f"preset must be 'desk' or 'toy', got {preset!r}")
    base_model = toy_config() if preset == "toy" else ModelConfig()
    m = tree.get("model") or {}
    if not isinstance(m, dict):
        raise ConfigurationError("model: expected a mapping")
    unknown = sorted(set(m) - set(_MODEL_SECTIONS) - {"d_text"})
    if unknown:
        raise ConfigurationError(f"model: unknown key(s) {', '.join(unknown)}")
    parts = {k: _build(cls, getattr(base_model, k), m.get(k) or {}, f"model.{k}")
             for k, cls in _MODEL_SECTIONS.items()}
    try:
        model = ModelConfig(d_text=m.get("d_text", base_model.d_text), **parts)
    except ConfigurationError as e:
        raise ConfigurationError(f"model: {e}") from e
    sections = {k: _build(cls, cls(), tree.get(k) or {}, k) for k, cls in _SECTIONS.items()
                if k != "train"}
    sections["train"] = _build(TrainConfig, TrainConfig(), tree.get("train") or {}, "train")
    seed = tree.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigurationError(f"seed must be an integer, got {seed!r}")
    return RunConfig(preset=preset, seed=seed, model=model, **sections)


def load(path=None, overrides=None) -> RunConfig:
    tree = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
            tree = yaml.safe_load(text) or {}
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigurationError(f"config {path} is not valid YAML: {e}") from e
        if not isinstance(tree, dict):
            raise ConfigurationError(f"config {path} must be a mapping at the top level")
    return from_dict(_merge(tree, parse_overrides(overrides)))


def to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return d
