"""Toy GEMM-layer pipeline: graph construction, forward execution, MAC accounting.

The pipeline mirrors a small vision-transformer block structure with one
embedding GEMM, four GEMMs per block (qkv, attention projection, two MLP
layers) and a prediction head.  The attention score matmuls are replaced
by a fixed token-mixing average between qkv and the projection layer, so
the model is self-contained while the protected GEMM set stays faithful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from gemmguard.numerics import INT_DTYPES, Matrix2D, Precision, gemm

__all__ = [
    "LayerSpec",
    "ModelGraph",
    "ActivationTrace",
    "Dataset",
    "LAYER_KINDS",
    "build_toy_model",
    "make_synthetic_dataset",
    "forward",
    "mac_count",
    "default_accum",
    "prepare_layer_input",
    "finish_layer_output",
    "working_array",
    "loss_from_logits",
]

LAYER_KINDS = ("embed", "qkv", "attn_proj", "mlp_fc1", "mlp_fc2", "head")

_LN_EPS = 1e-5


@dataclass
class LayerSpec:
    """One GEMM layer: weight is stored transposed (in_dim x out_dim)."""

    index: int
    name: str
    kind: str
    in_dim: int
    out_dim: int
    tokens: int
    weight: Matrix2D
    bias: np.ndarray
    activation: str = "none"
    normalize_before: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.weight.shape != (self.in_dim, self.out_dim):
            raise ValueError(
                f"layer {self.name}: weight shape {self.weight.shape} != "
                f"({self.in_dim}, {self.out_dim})"
            )
        if self.bias.ndim != 1 or self.bias.shape[0] != self.out_dim:
            raise ValueError(f"layer {self.name}: bias length != out_dim")
        if self.activation not in ("none", "gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ModelGraph:
    """Ordered GEMM pipeline ending in a single prediction head."""

    layers: list[LayerSpec]
    num_classes: int
    input_dim: int
    tokens: int
    dtype: str
    seed: int

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model has no layers")
        heads = [L for L in self.layers if L.kind == "head"]
        if len(heads) != 1 or self.layers[-1].kind != "head":
            raise ValueError("model requires exactly one head layer, at the end")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            eff_out = prev.out_dim // 3 if prev.kind == "qkv" else prev.out_dim
            if nxt.in_dim != eff_out:
                raise ValueError(
                    f"dim chain broken: {prev.name} feeds {eff_out}, "
                    f"{nxt.name} expects {nxt.in_dim}"
                )
        if self.layers[-1].out_dim != self.num_classes:
            raise ValueError("head out_dim must equal num_classes")

    @property
    def is_integer(self) -> bool:
        return self.dtype in INT_DTYPES

    def layer(self, index: int) -> LayerSpec:
        return self.layers[index]


@dataclass
class ActivationTrace:
    """Captured state of one forward pass."""

    logits: np.ndarray
    predicted_class: int
    loss: float
    label: int
    inputs: dict[int, Matrix2D] = field(default_factory=dict)
    outputs: dict[int, Matrix2D] = field(default_factory=dict)


@dataclass
class Dataset:
    """Synthetic labelled samples; labels come from a clean teacher pass."""

    inputs: list[Matrix2D]
    labels: list[int]
    ids: list[int]
    seed: int

    def __len__(self) -> int:
        return len(self.inputs)


def mac_count(layer: LayerSpec) -> int:
    """Multiply-accumulate operations of one forward pass through the layer."""
    return layer.tokens * layer.in_dim * layer.out_dim


def default_accum(dtype: str) -> Precision:
    if dtype in INT_DTYPES:
        return Precision.INT64
    return Precision.BINARY64 if dtype == "binary64" else Precision.BINARY32


def _activation_for(kind: str, dtype: str) -> str:
    if kind == "mlp_fc1":
        return "relu" if dtype in INT_DTYPES else "gelu"
    return "none"


def _normalize_for(kind: str, dtype: str) -> bool:
    if dtype in INT_DTYPES:
        return False
    return kind in ("qkv", "mlp_fc1", "head")


def _requant_shift(in_dim: int) -> int:
    # keeps typical int32 row sums within a healthy int8 range
    return 2 + (in_dim.bit_length() - 1) // 2


def _round_values(vals: np.ndarray, dtype: str) -> np.ndarray:
    with np.errstate(over="ignore"):
        if dtype == "binary16-emulated":
            return vals.astype(np.float16).astype(np.float64)
        if dtype == "binary32":
            return vals.astype(np.float32).astype(np.float64)
    return vals.astype(np.float64)


def _make_layer(index, name, kind, in_dim, out_dim, tokens, dtype, rng) -> LayerSpec:
    if dtype in INT_DTYPES:
        w = Matrix2D(rng.integers(-15, 16, (in_dim, out_dim)), "int8")
        bias = rng.integers(-64, 65, out_dim).astype(np.int32)
    else:
        w = Matrix2D(
            _round_values(rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim), dtype),
            dtype,
        )
        bias = _round_values(0.02 * rng.standard_normal(out_dim), dtype)
    return LayerSpec(
        index=index,
        name=name,
        kind=kind,
        in_dim=in_dim,
        out_dim=out_dim,
        tokens=tokens,
        weight=w,
        bias=bias,
        activation=_activation_for(kind, dtype),
        normalize_before=_normalize_for(kind, dtype),
    )


def build_toy_model(
    blocks: int,
    dim: int,
    tokens: int,
    classes: int,
    seed: int,
    dtype: str = "binary32",
) -> ModelGraph:
    """Seeded toy pipeline: embed + blocks x (qkv, attn_proj, mlp_fc1, mlp_fc2) + head.

    Weights are drawn from a seeded PRNG and scaled by 1/sqrt(in_dim)
    (integer models use small uniform integer weights instead); identical
    arguments always produce identical weight bytes.
    """
    if blocks < 1:
        raise ValueError("blocks must be >= 1")
    if dim < 4 or dim % 4 != 0:
        raise ValueError("dim must be >= 4 and divisible by 4")
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    layers: list[LayerSpec] = []

    def add(name, kind, in_dim, out_dim, layer_tokens=tokens):
        layers.append(
            _make_layer(len(layers), name, kind, in_dim, out_dim, layer_tokens, dtype, rng)
        )

    add("embed", "embed", dim, dim)
    for b in range(blocks):
        add(f"blk{b}.qkv", "qkv", dim, 3 * dim)
        add(f"blk{b}.attn_proj", "attn_proj", dim, dim)
        add(f"blk{b}.mlp_fc1", "mlp_fc1", dim, 4 * dim)
        add(f"blk{b}.mlp_fc2", "mlp_fc2", 4 * dim, dim)
    add("head", "head", dim, classes, layer_tokens=1)
    return ModelGraph(
        layers=layers,
        num_classes=classes,
        input_dim=dim,
        tokens=tokens,
        dtype=dtype,
        seed=seed,
    )


def make_synthetic_dataset(model: ModelGraph, size: int, seed: int) -> Dataset:
    """Seeded random inputs labelled by the model's own clean predictions."""
    if size < 1:
        raise ValueError("dataset size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xDA7A)))
    inputs, labels = [], []
    for _ in range(size):
        if model.is_integer:
            x = Matrix2D(rng.integers(-31, 32, (model.tokens, model.input_dim)), model.dtype)
        else:
            x = Matrix2D(
                _round_values(rng.standard_normal((model.tokens, model.input_dim)), model.dtype),
                model.dtype,
            )
        inputs.append(x)
        labels.append(forward(model, x, label=0).predicted_class)
    return Dataset(inputs=inputs, labels=labels, ids=list(range(size)), seed=seed)


# ---------------------------------------------------------------------------
# forward execution


def working_array(model: ModelGraph, x: Matrix2D) -> np.ndarray:
    """Initial hidden-state array: float64 lattice values, or int8 for integer models."""
    if x.dtype != model.dtype:
        raise ValueError(f"input dtype {x.dtype} != model dtype {model.dtype}")
    if x.shape != (model.tokens, model.input_dim):
        raise ValueError(
            f"input shape {x.shape} != (tokens={model.tokens}, input_dim={model.input_dim})"
        )
    if model.is_integer:
        return x.data.astype(np.int8)
    return x.data.astype(np.float64)


def _layer_norm(h: np.ndarray, dtype: str) -> np.ndarray:
    with np.errstate(invalid="ignore", over="ignore"):
        mean = h.mean(axis=1, keepdims=True)
        var = np.square(h - mean).mean(axis=1, keepdims=True)
        return _round_values((h - mean) / np.sqrt(var + _LN_EPS), dtype)


def _gelu(h: np.ndarray) -> np.ndarray:
    # tanh-form gelu, computed in binary64
    c = np.sqrt(2.0 / np.pi)
    with np.errstate(invalid="ignore", over="ignore"):
        return 0.5 * h * (1.0 + np.tanh(c * (h + 0.044715 * h**3)))


def prepare_layer_input(model: ModelGraph, layer: LayerSpec, h: np.ndarray) -> np.ndarray:
    """Hidden state -> the exact GEMM operand (head slice, then layer norm)."""
    x = h
    if layer.kind == "head":
        x = x[:1, :]
    if layer.normalize_before:
        x = _layer_norm(x, model.dtype)
    return x


def _mix_tokens(m: np.ndarray, model: ModelGraph) -> np.ndarray:
    if model.is_integer:
        mean = m.sum(axis=0, dtype=np.int64) // m.shape[0]
        return ((m.astype(np.int64) + mean) // 2).astype(np.int8)
    with np.errstate(invalid="ignore", over="ignore"):
        mean = m.mean(axis=0, keepdims=True)
        return _round_values(0.5 * m + 0.5 * mean, model.dtype)


def finish_layer_output(model: ModelGraph, layer: LayerSpec, y: np.ndarray) -> np.ndarray:
    """Raw GEMM output -> next hidden state (activation, requant, token mixing)."""
    if layer.kind == "head":
        return y
    h = y
    if model.is_integer:
        if layer.activation == "relu":
            h = np.maximum(h, 0)
        shift = _requant_shift(layer.in_dim)
        h = np.clip((h + (1 << (shift - 1))) >> shift, -128, 127).astype(np.int8)
    elif layer.activation == "gelu":
        h = _round_values(_gelu(h), model.dtype)
    elif layer.activation == "relu":
        h = np.maximum(h, 0.0)
    if layer.kind == "qkv":
        d = layer.out_dim // 3
        with np.errstate(invalid="ignore", over="ignore"):
            thirds = h[:, :d].astype(np.int64 if model.is_integer else np.float64)
            thirds = thirds + h[:, d : 2 * d] + h[:, 2 * d :]
            if model.is_integer:
                m = (thirds // 3).astype(np.int8)
            else:
                m = _round_values(thirds / 3.0, model.dtype)
        h = _mix_tokens(m, model)
    return h


def run_layer(model: ModelGraph, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Execute one layer's GEMM on a prepared input array; returns the raw output array."""
    xm = Matrix2D(x, model.dtype, _trusted=True)
    y = gemm(xm, layer.weight, bias=layer.bias, accum=default_accum(model.dtype))
    return y.data.astype(np.float64) if not model.is_integer else y.data


def loss_from_logits(logits: np.ndarray, label: int) -> float:
    """Softmax cross-entropy in binary64."""
    with np.errstate(invalid="ignore", over="ignore"):
        z = logits.astype(np.float64)
        z = z - z.max()
        lse = float(np.log(np.exp(z).sum()))
        return lse - float(z[label])


def output_dtype(model: ModelGraph) -> str:
    """dtype tag of raw GEMM outputs: int models widen to int32."""
    return "int32" if model.is_integer else model.dtype


def wrap_output(model: ModelGraph, y: np.ndarray) -> Matrix2D:
    return Matrix2D(y, output_dtype(model), _trusted=True)


def forward(
    model: ModelGraph,
    x: Matrix2D,
    label: int,
    tap: Iterable[int] = (),
) -> ActivationTrace:
    """Deterministic clean forward pass; tapped layers are captured by value.

    The per-layer "output" is always the raw GEMM result, before any
    activation, requantization or token mixing.
    """
    if not 0 <= label < model.num_classes:
        raise ValueError(f"label {label} out of range")
    tapped = frozenset(tap)
    h = working_array(model, x)
    inputs: dict[int, Matrix2D] = {}
    outputs: dict[int, Matrix2D] = {}
    for layer in model.layers:
        xin = prepare_layer_input(model, layer, h)
        y = run_layer(model, layer, xin)
        if layer.index in tapped:
            inputs[layer.index] = Matrix2D(xin, model.dtype, _trusted=True)
            outputs[layer.index] = wrap_output(model, y)
        h = finish_layer_output(model, layer, y)
    logits = h[0].astype(np.float64)
    return ActivationTrace(
        logits=logits,
        predicted_class=int(np.argmax(logits)),
        loss=loss_from_logits(logits, label),
        label=label,
        inputs=inputs,
        outputs=outputs,
    )
