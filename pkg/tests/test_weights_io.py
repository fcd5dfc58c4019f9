import struct

import numpy as np
import pytest

from gemmguard.errors import WeightFormatError
from gemmguard.model import build_toy_model, forward, make_synthetic_dataset
from gemmguard.weights_io import MAGIC, load_weights, save_weights


@pytest.mark.parametrize("dtype", ["binary64", "binary32", "binary16-emulated", "int8"])
def test_round_trip_bit_exact(tmp_path, dtype):
    m = build_toy_model(blocks=1, dim=8, tokens=3, classes=4, seed=31, dtype=dtype)
    path = tmp_path / "model.bin"
    save_weights(path, m)
    loaded = load_weights(path)
    assert loaded.dtype == m.dtype
    assert loaded.tokens == m.tokens
    assert loaded.num_classes == m.num_classes
    assert loaded.seed == m.seed
    for a, b in zip(m.layers, loaded.layers):
        assert a.kind == b.kind
        assert a.weight.data.tobytes() == b.weight.data.tobytes()
        assert a.bias.tobytes() == b.bias.tobytes()
        assert a.activation == b.activation
        assert a.normalize_before == b.normalize_before


def test_round_trip_preserves_behavior(tmp_path):
    m = build_toy_model(blocks=1, dim=8, tokens=2, classes=4, seed=5)
    save_weights(tmp_path / "m.bin", m)
    loaded = load_weights(tmp_path / "m.bin")
    x = make_synthetic_dataset(m, 1, seed=7).inputs[0]
    assert forward(m, x, 0).logits.tobytes() == forward(loaded, x, 0).logits.tobytes()


def test_save_is_stable(tmp_path):
    m = build_toy_model(blocks=1, dim=8, tokens=2, classes=4, seed=5)
    save_weights(tmp_path / "a.bin", m)
    save_weights(tmp_path / "b.bin", load_weights(tmp_path / "a.bin"))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(WeightFormatError, match="bad magic"):
        load_weights(p)


def test_version_mismatch(tmp_path):
    p = tmp_path / "v9.bin"
    p.write_bytes(MAGIC + struct.pack("<II", 9, 0))
    with pytest.raises(WeightFormatError, match="version mismatch"):
        load_weights(p)


def test_truncated_mid_tensor_names_tensor(tmp_path):
    m = build_toy_model(blocks=1, dim=8, tokens=2, classes=4, seed=5)
    p = tmp_path / "full.bin"
    save_weights(p, m)
    data = p.read_bytes()
    # cut into the middle of the first layer's weight payload
    marker = b"layer000.embed.weight"
    cut = data.index(marker) + len(marker) + 20
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(data[:cut])
    with pytest.raises(WeightFormatError, match="layer000.embed.weight"):
        load_weights(trunc)


def test_dim_overflow_rejected(tmp_path):
    p = tmp_path / "dim.bin"
    name = b"layer000.embed.weight"
    body = struct.pack("<H", len(name)) + name + struct.pack("<BB", 0, 2)
    body += struct.pack("<II", 2**31, 4)
    p.write_bytes(MAGIC + struct.pack("<II", 1, 1) + body)
    with pytest.raises(WeightFormatError, match="dim overflow"):
        load_weights(p)
