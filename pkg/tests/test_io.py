import struct

import numpy as np
import pytest
import torch

from esica import io
from esica.errors import FormatError
from esica.model import ESICA, toy_config
from esica.verify import serialization_suite


def test_volume_round_trip_float_and_labels(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.standard_normal((3, 4, 5)).astype(np.float32)
    buf = io.encode_volume(img, (1.5, 1.0, 2.0))
    back, sp = io.decode_volume(buf)
    assert np.array_equal(back, img) and sp == (1.5, 1.0, 2.0)
    assert io.encode_volume(back, sp) == buf

    lab = rng.integers(0, 300, (2, 3, 4))
    io.write_volume(tmp_path / "l.esv", lab, (1, 1, 1))
    back, _ = io.read_volume(tmp_path / "l.esv")
    assert back.dtype == np.int64 and np.array_equal(back, lab)


def test_volume_header_layout():
    buf = io.encode_volume(np.zeros((2, 3, 4), np.float32), (1.0, 2.0, 3.0))
    assert buf[:4] == b"ESV1"
    assert struct.unpack_from("<I3I", buf, 4) == (1, 2, 3, 4)
    assert len(buf) == 4 + 4 + 12 + 12 + 1 + 24 * 4


@pytest.mark.parametrize("mutate", [
    lambda b: b"ESV2" + b[4:],
    lambda b: b[:-1],
    lambda b: b + b"\0",
    lambda b: b[:10],
    lambda b: b[:32] + b"\x07" + b[33:],
])
def test_volume_corruption_is_typed(mutate):
    buf = io.encode_volume(np.ones((2, 2, 2), np.float32), (1, 1, 1))
    with pytest.raises(FormatError):
        io.decode_volume(mutate(buf))


def test_label_range_checked():
    with pytest.raises(FormatError):
        io.encode_volume(np.full((2, 2, 2), 70000), (1, 1, 1))


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = ESICA(toy_config())
    path = tmp_path / "m.esck"
    io.save_checkpoint(path, model, {"stage": "positive_only"})
    loaded, meta = io.load_checkpoint(path)
    assert meta["stage"] == "positive_only"
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    io.save_checkpoint(tmp_path / "again.esck", loaded, meta)
    assert (tmp_path / "again.esck").read_bytes() == path.read_bytes()


def test_checkpoint_dtypes_and_scalars():
    tensors = {"a": np.arange(3, dtype=np.int64), "b": np.float64(2.5) * np.ones(()),
               "c": np.zeros((2, 0), np.float32), "d": np.array([1, 2], np.uint8)}
    out, meta = io.decode_checkpoint(io.encode_checkpoint(tensors, {"x": 1}))
    assert meta == {"x": 1}
    for k, v in tensors.items():
        assert out[k].dtype == v.dtype and np.array_equal(out[k], v)


@pytest.mark.parametrize("cut", [0, 3, 7, 11, 20, -1])
def test_checkpoint_truncation_is_typed(cut):
    buf = io.encode_checkpoint({"w": torch.ones(3, 2)}, {"k": "v"})
    with pytest.raises(FormatError):
        io.decode_checkpoint(buf[:cut] if cut >= 0 else buf[:-1])


def test_checkpoint_bad_magic_and_trailing():
    buf = io.encode_checkpoint({"w": torch.ones(2)})
    with pytest.raises(FormatError, match="magic"):
        io.decode_checkpoint(b"ESCK v2" + buf[7:])
    with pytest.raises(FormatError, match="trailing"):
        io.decode_checkpoint(buf + b"\0")


def test_checkpoint_unsupported_dtype():
    with pytest.raises(FormatError):
        io.encode_checkpoint({"w": np.zeros(2, np.complex64)})


def test_serialization_suite_passes():
    assert all(c.passed for c in serialization_suite(n=5))
