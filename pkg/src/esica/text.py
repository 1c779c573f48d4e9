"""Prompt-embedding providers.

Only a single pooled vector per prompt crosses this boundary.  Two providers
are interchangeable: a deterministic hashed bag-of-tokens embedder and a
lookup table loaded from an ``ESICA-EMB v1`` text file.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
import torch

from .errors import ConfigurationError, FormatError, InputError

TABLE_MAGIC = "ESICA-EMB"
TABLE_VERSION = "v1"
_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass(frozen=True)
class PromptEmbedding:
    vector: torch.Tensor
    source: str
    prompt_text: str

    def __post_init__(self):
        if self.vector.dim() != 1:
            raise InputError("embedding vector must be 1-D")
        if not torch.isfinite(self.vector).all():
            raise InputError(f"embedding for {self.prompt_text!r} has non-finite values")

    @property
    def d_text(self) -> int:
        return self.vector.shape[0]


class Embedder(Protocol):
    d_text: int

    def embed(self, prompt: str) -> PromptEmbedding: ...


def tokenize(prompt: str) -> list[str]:
    return _TOKEN.findall(prompt.lower())


def _bucket(token: str, d_text: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                             key=seed.to_bytes(8, "little")).digest()
    h = int.from_bytes(digest, "little")
    return h % d_text, (1.0 if (h >> 63) & 1 == 0 else -1.0)


def embed_toy(prompt: str, d_text: int = 64, seed: int = 0) -> PromptEmbedding:
    """Signed feature hashing of the prompt's tokens, L2-normalised."""
    tokens = tokenize(prompt)
    if not tokens:
        raise InputError(f"prompt {prompt!r} has no tokens")
    v = np.zeros(d_text, dtype=np.float64)
    for tok in tokens:
        idx, sign = _bucket(tok, d_text, seed)
        v[idx] += sign
    norm = math.sqrt(float(v @ v))
    if norm == 0.0:
        raise InputError(f"prompt {prompt!r} hashes to the zero vector")
    return PromptEmbedding(torch.from_numpy(v / norm), "toy", prompt)


class ToyEmbedder:
    def __init__(self, d_text: int = 64, seed: int = 0):
        self.d_text = d_text
        self.seed = seed

    def embed(self, prompt: str) -> PromptEmbedding:
        return embed_toy(prompt, self.d_text, self.seed)


class TableEmbedder:
    def __init__(self, table: Mapping[str, PromptEmbedding], d_text: int | None = None):
        dims = {e.d_text for e in table.values()}
        if len(dims) > 1:
            raise ConfigurationError(f"table mixes embedding widths {sorted(dims)}")
        width = dims.pop() if dims else d_text
        if d_text is not None and width != d_text:
            raise ConfigurationError(f"table width {width} does not match model d_text {d_text}")
        self.d_text = width
        self.table = dict(table)

    @classmethod
    def from_file(cls, path, d_text: int | None = None) -> "TableEmbedder":
        return cls(load_table(path), d_text)

    def embed(self, prompt: str) -> PromptEmbedding:
        try:
            return self.table[prompt]
        except KeyError:
            raise InputError(f"prompt {prompt!r} is not in the embedding table") from None


def _check_prompt_key(prompt: str) -> None:
    if not prompt or any(c in prompt for c in '"\t\n\r'):
        raise InputError(f"prompt {prompt!r} cannot be stored in an embedding table")


def dump_table(entries: Mapping[str, torch.Tensor | np.ndarray], path) -> None:
    """Write ``prompt -> vector`` pairs; floats use shortest round-trip repr."""
    rows = []
    width = None
    for prompt, vec in entries.items():
        _check_prompt_key(prompt)
        arr = np.asarray(vec.detach().cpu() if isinstance(vec, torch.Tensor) else vec, dtype=np.float64)
        if width is None:
            width = arr.shape[0]
        elif arr.shape[0] != width:
            raise ConfigurationError(f"prompt {prompt!r} has width {arr.shape[0]}, expected {width}")
        rows.append(f'"{prompt}"\t' + " ".join(repr(float(x)) for x in arr))
    header = f"{TABLE_MAGIC} {TABLE_VERSION} {width or 0}"
    Path(path).write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")


def load_table(path) -> dict[str, PromptEmbedding]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not UTF-8 ({e})") from None
    if not text:
        raise FormatError(f"{path}:1: empty file")
    if not text.endswith("\n"):
        # every writer ends lines with a newline; a missing one means truncation
        raise FormatError(f"{path}: truncated (no final newline)")
    lines = text[:-1].split("\n")
    head = lines[0].split(" ")
    if len(head) != 3 or head[0] != TABLE_MAGIC or head[1] != TABLE_VERSION:
        raise FormatError(f"{path}:1: expected header '{TABLE_MAGIC} {TABLE_VERSION} <d_text>'")
    try:
        d_text = int(head[2])
    except ValueError:
        raise FormatError(f"{path}:1: bad d_text {head[2]!r}") from None
    if d_text < 1:
        raise FormatError(f"{path}:1: d_text must be positive")

    table: dict[str, PromptEmbedding] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        key_part, sep, values = line.partition("\t")
        if not sep or len(key_part) < 2 or key_part[0] != '"' or key_part[-1] != '"':
            raise FormatError(f"{path}:{lineno}: expected '\"<prompt>\"<TAB><floats>'")
        prompt = key_part[1:-1]
        if not prompt or '"' in prompt:
            raise FormatError(f"{path}:{lineno}: invalid prompt key {key_part!r}")
        if prompt in table:
            raise FormatError(f"{path}:{lineno}: duplicate prompt {prompt!r}")
        fields = values.split(" ")
        if len(fields) != d_text:
            raise FormatError(f"{path}:{lineno}: expected {d_text} values, got {len(fields)}")
        try:
            vec = np.array([float(x) for x in fields], dtype=np.float64)
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from None
        if not np.isfinite(vec).all():
            raise FormatError(f"{path}:{lineno}: non-finite value")
        table[prompt] = PromptEmbedding(torch.from_numpy(vec), "table", prompt)
    return table
