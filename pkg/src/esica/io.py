"""Binary volume (ESV1) and checkpoint (ESCK) formats.

All integers are little-endian.  Readers validate every length against the
bytes actually present and raise :class:`FormatError` instead of crashing.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

ESV_MAGIC = b"ESV1"
ESV_VERSION = 1
_ESV_HEAD = struct.Struct("<4sI3I3fB")
ESV_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}

ESCK_MAGIC = b"ESCK v1"
ESCK_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u1")}
_ESCK_CODES = {v: k for k, v in ESCK_DTYPES.items()}


# ESV1 ------------------------------------------------------------------------

def encode_volume(array: np.ndarray, spacing) -> bytes:
    """Serialize a 3-D image (float32, tag 0) or label map (uint16, tag 1)."""
    arr = np.asarray(array)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3:
        raise FormatError(f"ESV1 stores 3-D arrays, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.floating):
        tag = 0
    else:
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise FormatError("label values must fit in u16")
        tag = 1
    head = _ESV_HEAD.pack(ESV_MAGIC, ESV_VERSION, *arr.shape, *map(float, spacing), tag)
    return head + np.ascontiguousarray(arr, dtype=ESV_DTYPES[tag]).tobytes(order="C")


def decode_volume(buf: bytes) -> tuple[np.ndarray, tuple[float, float, float]]:
    if len(buf) < _ESV_HEAD.size:
        raise FormatError(f"ESV1 header truncated: {len(buf)} < {_ESV_HEAD.size} bytes")
    magic, version, h, w, d, sh, sw, sd, tag = _ESV_HEAD.unpack_from(buf)
    if magic != ESV_MAGIC:
        raise FormatError(f"bad ESV1 magic {magic!r}")
    if version != ESV_VERSION:
        raise FormatError(f"unsupported ESV1 version {version}")
    if tag not in ESV_DTYPES:
        raise FormatError(f"unknown ESV1 dtype tag {tag}")
    dt = ESV_DTYPES[tag]
    n = h * w * d * dt.itemsize
    body = buf[_ESV_HEAD.size:]
    if len(body) != n:
        raise FormatError(f"ESV1 payload is {len(body)} bytes, header promises {n}")
    arr = np.frombuffer(body, dtype=dt).reshape(h, w, d)
    return arr.astype(np.float32 if tag == 0 else np.int64), (sh, sw, sd)


def write_volume(path, array, spacing) -> None:
    Path(path).write_bytes(encode_volume(array, spacing))


def read_volume(path):
    return decode_volume(Path(path).read_bytes())


# ESCK ------------------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def encode_checkpoint(tensors: dict[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> bytes:
    """Ordered manifest of (name, dtype, shape), a JSON metadata blob, then payloads."""
    arrays = []
    for name, t in tensors.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        dt = a.dtype.newbyteorder("<")
        if dt not in _ESCK_CODES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {a.dtype}")
        arrays.append((name, np.asarray(a, dtype=dt).copy(order="C")))
    out = [ESCK_MAGIC, struct.pack("<I", len(arrays))]
    for name, a in arrays:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _ESCK_CODES[a.dtype], a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)) + blob)
    out += [a.tobytes(order="C") for _, a in arrays]
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    magic = r.take(len(ESCK_MAGIC), "magic")
    if magic != ESCK_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    (count,) = r.unpack("<I", "tensor count")
    manifest = []
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of entry {i}")
        try:
            name = r.take(n, f"name of entry {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"entry {i} name is not UTF-8") from e
        code, ndim = r.unpack("<BB", f"dtype of {name!r}")
        if code not in ESCK_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name!r}")
        manifest.append((name, ESCK_DTYPES[code], shape))
    (m,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(m, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint metadata is not valid JSON: {e}") from e
    tensors = {}
    for name, dt, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n, f"payload of {name!r}"), dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last payload")
    return tensors, meta


def save_checkpoint(path, model, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    if hasattr(model, "cfg"):
        meta.setdefault("model", model.cfg.to_dict())
    Path(path).write_bytes(encode_checkpoint(model.state_dict(), meta))


def load_checkpoint(path):
    """Return ``(model, meta)``; the model is rebuilt from the stored config."""
    from .model import ESICA, ModelConfig

    tensors, meta = decode_checkpoint(Path(path).read_bytes())
    if "model" not in meta:
        raise FormatError("checkpoint metadata lacks a model config")
    model = ESICA(ModelConfig.from_dict(meta["model"]))
    state = model.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint misses tensors: {sorted(missing)[:5]}")
    model.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in tensors.items()})
    return model, meta
