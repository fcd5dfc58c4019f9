"""Binary weight container for model graphs.

Layout (little-endian): magic "ALBT", u32 version=1, u32 tensor_count;
per tensor: u16 name_len, UTF-8 name, u8 dtype tag
{0: binary64, 1: binary32, 2: binary16, 3: int8, 4: int32}, u8 rank,
rank x u32 dims, raw row-major payload.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from gemmguard.errors import WeightFormatError
from gemmguard.model import LayerSpec, ModelGraph, _activation_for, _normalize_for
from gemmguard.numerics import Matrix2D

__all__ = ["save_weights", "load_weights", "MAGIC", "VERSION"]

MAGIC = b"ALBT"
VERSION = 1

_TAG_TO_NP = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<f2"),
    3: np.dtype("<i1"),
    4: np.dtype("<i4"),
}
_DTYPE_TO_TAG = {
    "binary64": 0,
    "binary32": 1,
    "binary16-emulated": 2,
    "int8": 3,
    "int32": 4,
}
_TAG_TO_DTYPE = {v: k for k, v in _DTYPE_TO_TAG.items()}

_MAX_DIM = 2**31


def _payload(values: np.ndarray, tag: int) -> bytes:
    return np.ascontiguousarray(values.astype(_TAG_TO_NP[tag])).tobytes()


def _write_tensor(f: BinaryIO, name: str, values: np.ndarray, tag: int) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<BB", tag, values.ndim))
    f.write(struct.pack(f"<{values.ndim}I", *values.shape))
    f.write(_payload(values, tag))


def _bias_tag(model_dtype: str) -> int:
    return 4 if model_dtype in ("int8", "int32") else _DTYPE_TO_TAG[model_dtype]


def save_weights(path, model: ModelGraph) -> None:
    """Write the model's tensors plus a small metadata tensor."""
    seed = int(model.seed) & 0xFFFFFFFFFFFFFFFF
    meta = np.array(
        [
            model.tokens,
            model.num_classes,
            model.input_dim,
            _DTYPE_TO_TAG[model.dtype],
            np.uint32(seed & 0xFFFFFFFF).view(np.int32),
            np.uint32(seed >> 32).view(np.int32),
        ],
        dtype=np.int32,
    )
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, 2 * len(model.layers) + 1))
        _write_tensor(f, "graph.meta", meta, 4)
        for layer in model.layers:
            base = f"layer{layer.index:03d}.{layer.kind}"
            _write_tensor(f, f"{base}.weight", layer.weight.data, _DTYPE_TO_TAG[model.dtype])
            _write_tensor(f, f"{base}.bias", layer.bias, _bias_tag(model.dtype))


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise WeightFormatError(f"truncated container while reading {what}")
    return buf


def _read_tensor(f: BinaryIO) -> tuple[str, int, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2, "tensor name length"))
    name = _read_exact(f, name_len, "tensor name").decode("utf-8")
    tag, rank = struct.unpack("<BB", _read_exact(f, 2, f"tensor {name} header"))
    if tag not in _TAG_TO_NP:
        raise WeightFormatError(f"tensor {name}: unknown dtype tag {tag}")
    if rank > 2:
        raise WeightFormatError(f"tensor {name}: unsupported rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"tensor {name} dims"))
    count = 1
    for d in dims:
        if d >= _MAX_DIM:
            raise WeightFormatError(f"tensor {name}: dim overflow ({d})")
        count *= d
    np_dtype = _TAG_TO_NP[tag]
    raw = _read_exact(f, count * np_dtype.itemsize, f"tensor {name} payload")
    return name, tag, np.frombuffer(raw, dtype=np_dtype).reshape(dims)


def load_weights(path) -> ModelGraph:
    """Reconstruct a ModelGraph from a weight container; round-trip is bit-exact."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise WeightFormatError("bad magic")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise WeightFormatError(f"version mismatch: got {version}, expected {VERSION}")
        tensors = {}
        for _ in range(count):
            name, tag, values = _read_tensor(f)
            tensors[name] = (tag, values)

    if "graph.meta" not in tensors:
        raise WeightFormatError("missing graph.meta tensor")
    meta = tensors.pop("graph.meta")[1]
    tokens, num_classes, input_dim = (int(v) for v in meta[:3])
    dtype = _TAG_TO_DTYPE.get(int(meta[3]))
    if dtype is None:
        raise WeightFormatError(f"graph.meta: unknown model dtype tag {int(meta[3])}")
    seed = int(meta[4].view(np.uint32)) | (int(meta[5].view(np.uint32)) << 32)

    by_index: dict[int, dict[str, tuple[int, np.ndarray]]] = {}
    kinds: dict[int, str] = {}
    for name, payload in tensors.items():
        try:
            prefix, kind, field = name.split(".")
            index = int(prefix.removeprefix("layer"))
        except ValueError:
            raise WeightFormatError(f"unrecognized tensor name {name!r}") from None
        kinds[index] = kind
        by_index.setdefault(index, {})[field] = payload

    layers = []
    for index in sorted(by_index):
        entry = by_index[index]
        if "weight" not in entry or "bias" not in entry:
            raise WeightFormatError(f"layer {index}: missing weight or bias tensor")
        _, wvals = entry["weight"]
        _, bvals = entry["bias"]
        if wvals.ndim != 2 or bvals.ndim != 1:
            raise WeightFormatError(f"layer {index}: bad tensor ranks")
        kind = kinds[index]
        in_dim, out_dim = wvals.shape
        if dtype == "binary16-emulated":
            wvals = wvals.astype(np.float64)
            bvals = bvals.astype(np.float64)
        bias = bvals.astype(np.int32) if dtype in ("int8", "int32") else bvals.astype(np.float64)
        layers.append(
            LayerSpec(
                index=index,
                name=f"layer{index:03d}.{kind}",
                kind=kind,
                in_dim=in_dim,
                out_dim=out_dim,
                tokens=1 if kind == "head" else tokens,
                weight=Matrix2D(wvals, dtype),
                bias=bias,
                activation=_activation_for(kind, dtype),
                normalize_before=_normalize_for(kind, dtype),
            )
        )
    return ModelGraph(
        layers=layers,
        num_classes=num_classes,
        input_dim=input_dim,
        tokens=tokens,
        dtype=dtype,
        seed=seed,
    )
