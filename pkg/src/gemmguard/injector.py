"""Range-constrained single-bit-flip injection into layer inputs, outputs, and weights.

Campaigns are reproducible: each injection draws from a PRNG stream derived
from (campaign seed, layer, injection index), so results are independent of
execution order and merge deterministically.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from statistics import NormalDist

import numpy as np

from gemmguard.errors import SamplingError
from gemmguard.model import (
    ActivationTrace,
    ModelGraph,
    finish_layer_output,
    forward,
    loss_from_logits,
    prepare_layer_input,
    run_layer,
    working_array,
)
from gemmguard.numerics import INT_DTYPES, Matrix2D, flip_bit, float_fields
from gemmguard.profiler import GoldenSet, RangeProfile

__all__ = [
    "InjectionSpec",
    "InjectionRecord",
    "CampaignResult",
    "LOCATIONS",
    "BIT_MODES",
    "sample_injection",
    "inject_forward",
    "injected_forward",
    "run_campaign",
    "margin_of_error",
    "default_modes",
]

LOCATIONS = ("input", "output", "weight")
BIT_MODES = ("int_bit", "fp_sign_bit", "fp_exponent_bit", "fp_mantissa_bit")
VALUE_MODES = ("random_value", "fixed_value")

# retry budget for range-constrained sampling before a layer is skipped
MAX_RETRIES = 64


@dataclass(frozen=True)
class InjectionSpec:
    """Where and what to corrupt: one element, one transient fault."""

    layer_index: int
    location: str
    element_index: int
    bit_index: int | None
    mode: str
    sample_id: int
    seed: int
    value: float | int | None = None  # replacement for random_value / fixed_value


@dataclass
class InjectionRecord:
    """Observed outcome of a single injected inference."""

    spec: InjectionSpec
    original_value: float
    corrupted_value: float
    golden_loss: float
    corrupted_loss: float
    golden_class: int
    corrupted_class: int
    mismatch: bool
    detected: bool | None = None
    detection_layer: int | None = None


def default_modes(model: ModelGraph, location: str = "output") -> tuple[str, ...]:
    """Paper-default flip modes: exponent/mantissa for floats, any bit for ints."""
    if _target_dtype(model, location) in INT_DTYPES:
        return ("int_bit",)
    return ("fp_exponent_bit", "fp_mantissa_bit")


def _target_dtype(model: ModelGraph, location: str) -> str:
    if location == "output" and model.is_integer:
        return "int32"
    return model.dtype


def _bit_range(dtype: str, mode: str) -> tuple[int, int]:
    if dtype in INT_DTYPES:
        if mode != "int_bit":
            raise ValueError(f"mode {mode!r} invalid for integer dtype {dtype}")
        return (0, 8 if dtype == "int8" else 32)
    mant, exp = float_fields(dtype)
    if mode == "fp_mantissa_bit":
        return (0, mant)
    if mode == "fp_exponent_bit":
        return (mant, mant + exp)
    if mode == "fp_sign_bit":
        return (mant + exp, mant + exp + 1)
    raise ValueError(f"mode {mode!r} invalid for floating dtype {dtype}")


def _flip(value: float, bit_index: int, dtype: str) -> float:
    out = flip_bit(value, bit_index, dtype)
    return int(out) if dtype in INT_DTYPES else float(out)


def _target_array(
    model: ModelGraph, layer_index: int, location: str, trace: ActivationTrace
) -> np.ndarray:
    if location == "output":
        return trace.outputs[layer_index].widened()
    if location == "input":
        return trace.inputs[layer_index].widened()
    if location == "weight":
        return model.layers[layer_index].weight.widened()
    raise ValueError(f"unknown injection location {location!r}")


def sample_injection(
    model: ModelGraph,
    ranges: RangeProfile,
    golden: GoldenSet,
    rng: np.random.Generator,
    *,
    layer_index: int | None = None,
    sample_id: int | None = None,
    locations: tuple[str, ...] = ("output",),
    modes: tuple[str, ...] | None = None,
    seed: int = 0,
    clean_trace: ActivationTrace | None = None,
    max_retries: int = MAX_RETRIES,
) -> InjectionSpec:
    """Draw one injection whose corrupted value stays inside the layer's range.

    No-op corruptions (corrupted == original, e.g. a sign flip of 0.0) are
    resampled, since they cannot propagate.  Raises SamplingError when the
    retry budget is exhausted (degenerate range).

    The range constraint applies to output-location injections, the profiled
    quantity; input and weight locations only resample no-ops.
    """
    if len(golden) == 0:
        raise ValueError("sample_injection requires a nonempty golden set")
    if layer_index is None:
        layer_index = int(rng.integers(len(model.layers)))
    if sample_id is None:
        sample_id = golden.sample_ids[int(rng.integers(len(golden)))]
    location = locations[int(rng.integers(len(locations)))]
    if modes is None:
        modes = default_modes(model, location)
    dtype = _target_dtype(model, location)
    if clean_trace is None:
        clean_trace = forward(
            model, golden.input_for(sample_id), golden.labels[sample_id], tap=[layer_index]
        )
    target = _target_array(model, layer_index, location, clean_trace).ravel()
    lo, hi = ranges.bounds[layer_index]

    for _ in range(max_retries):
        element = int(rng.integers(target.size))
        mode = modes[int(rng.integers(len(modes)))]
        original = target[element]
        original = int(original) if dtype in INT_DTYPES else float(original)
        bit: int | None = None
        value: float | int | None = None
        if mode in BIT_MODES:
            b0, b1 = _bit_range(dtype, mode)
            bit = int(rng.integers(b0, b1))
            corrupted = _flip(original, bit, dtype)
        elif mode == "random_value":
            if dtype in INT_DTYPES:
                corrupted = int(rng.integers(int(lo), int(hi) + 1))
            else:
                corrupted = float(rng.uniform(lo, hi))
            value = corrupted
        else:
            raise ValueError(f"cannot sample mode {mode!r}")
        if corrupted == original:
            continue  # no-op corruption cannot propagate
        if location == "output":
            if not (lo <= corrupted <= hi):
                continue
        elif isinstance(corrupted, float) and not math.isfinite(corrupted):
            continue
        return InjectionSpec(
            layer_index=layer_index,
            location=location,
            element_index=element,
            bit_index=bit,
            mode=mode,
            sample_id=sample_id,
            seed=seed,
            value=value,
        )
    raise SamplingError(
        f"layer {layer_index}: no in-range corruption found in {max_retries} attempts "
        f"(range [{lo}, {hi}])"
    )


def corrupted_value_for(spec: InjectionSpec, original: float, dtype: str) -> float:
    """Replacement value an injection applies at its target element."""
    if spec.mode in BIT_MODES:
        return _flip(original, spec.bit_index, dtype)
    if spec.mode in VALUE_MODES:
        if spec.value is None:
            raise ValueError(f"{spec.mode} spec carries no value")
        return spec.value
    raise ValueError(f"unknown injection mode {spec.mode!r}")


def injected_forward(
    model: ModelGraph,
    x: Matrix2D,
    label: int,
    spec: InjectionSpec,
    tap: tuple[int, ...] = (),
) -> tuple[ActivationTrace, float, float]:
    """Forward pass with one transient corruption; returns (trace, original, corrupted).

    The targeted element is replaced in a scratch copy: weights are never
    mutated and the fault exists for this single inference only.
    """
    tapped = frozenset(tap)
    if not 0 <= spec.layer_index < len(model.layers):
        raise ValueError(f"layer index {spec.layer_index} out of range")
    layer = model.layers[spec.layer_index]
    h = working_array(model, x)
    inputs: dict[int, Matrix2D] = {}
    outputs: dict[int, Matrix2D] = {}
    original = corrupted = math.nan
    for L in model.layers:
        xin = prepare_layer_input(model, L, h)
        weight = L.weight
        if L.index == spec.layer_index:
            if spec.location == "input":
                xin = xin.copy()
                flat = xin.reshape(-1)
                _check_element(spec, flat.size)
                original = _as_scalar(flat[spec.element_index], model.dtype)
                corrupted = corrupted_value_for(spec, original, model.dtype)
                flat[spec.element_index] = corrupted
            elif spec.location == "weight":
                wdata = weight.data.copy()
                flat = wdata.reshape(-1)
                _check_element(spec, flat.size)
                original = _as_scalar(flat[spec.element_index], model.dtype)
                corrupted = corrupted_value_for(spec, original, model.dtype)
                flat[spec.element_index] = corrupted
                weight = Matrix2D(wdata, model.dtype, _trusted=True)
        scratch = replace(L, weight=weight) if weight is not L.weight else L
        y = run_layer(model, scratch, xin)
        if L.index == spec.layer_index and spec.location == "output":
            flat = y.reshape(-1)
            _check_element(spec, flat.size)
            odtype = "int32" if model.is_integer else model.dtype
            original = _as_scalar(flat[spec.element_index], odtype)
            corrupted = corrupted_value_for(spec, original, odtype)
            flat[spec.element_index] = corrupted
        if L.index in tapped:
            inputs[L.index] = Matrix2D(xin, model.dtype, _trusted=True)
            outputs[L.index] = Matrix2D(
                y, "int32" if model.is_integer else model.dtype, _trusted=True
            )
        h = finish_layer_output(model, L, y)
    logits = h[0].astype(np.float64)
    trace = ActivationTrace(
        logits=logits,
        predicted_class=int(np.argmax(logits)),
        loss=loss_from_logits(logits, label),
        label=label,
        inputs=inputs,
        outputs=outputs,
    )
    return trace, original, corrupted


def _check_element(spec: InjectionSpec, size: int) -> None:
    if not 0 <= spec.element_index < size:
        raise ValueError(f"element index {spec.element_index} out of range for size {size}")


def _as_scalar(v, dtype: str):
    return int(v) if dtype in INT_DTYPES else float(v)


def inject_forward(
    model: ModelGraph,
    x: Matrix2D,
    label: int,
    spec: InjectionSpec,
    clean_trace: ActivationTrace | None = None,
) -> InjectionRecord:
    """Run one injection experiment and record the observed outcome."""
    if clean_trace is None:
        clean_trace = forward(model, x, label)
    trace, original, corrupted = injected_forward(model, x, label, spec)
    return InjectionRecord(
        spec=spec,
        original_value=original,
        corrupted_value=corrupted,
        golden_loss=clean_trace.loss,
        corrupted_loss=trace.loss,
        golden_class=clean_trace.predicted_class,
        corrupted_class=trace.predicted_class,
        mismatch=trace.predicted_class != clean_trace.predicted_class,
    )


# ---------------------------------------------------------------------------
# campaigns


@dataclass
class CampaignResult:
    """All records of one campaign plus exact per-layer aggregations."""

    records: list[InjectionRecord]
    seed: int
    n_per_layer: int
    skipped: dict[int, int]

    def layer_tallies(self) -> dict[int, dict[str, float]]:
        tallies: dict[int, dict[str, float]] = {}
        for rec in self.records:
            t = tallies.setdefault(
                rec.spec.layer_index,
                {"injections": 0, "mismatches": 0, "loss_delta_sum": 0.0},
            )
            t["injections"] += 1
            t["mismatches"] += int(rec.mismatch)
            t["loss_delta_sum"] += rec.corrupted_loss - rec.golden_loss
        return tallies

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            [
                "layer",
                "location",
                "element",
                "bit",
                "mode",
                "sample",
                "orig",
                "corrupt",
                "golden_loss",
                "corrupt_loss",
                "mismatch",
                "detected",
                "detection_layer",
            ]
        )
        for r in self.records:
            writer.writerow(
                [
                    r.spec.layer_index,
                    r.spec.location,
                    r.spec.element_index,
                    "" if r.spec.bit_index is None else r.spec.bit_index,
                    r.spec.mode,
                    r.spec.sample_id,
                    _num(r.original_value),
                    _num(r.corrupted_value),
                    _num(r.golden_loss),
                    _num(r.corrupted_loss),
                    int(r.mismatch),
                    "" if r.detected is None else int(r.detected),
                    "" if r.detection_layer is None else r.detection_layer,
                ]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seed: int = 0, n_per_layer: int = 0) -> "CampaignResult":
        records = []
        for row in csv.DictReader(io.StringIO(text)):
            mode = row["mode"]
            bit = None if row["bit"] == "" else int(row["bit"])
            corrupted = _parse_num(row["corrupt"])
            spec = InjectionSpec(
                layer_index=int(row["layer"]),
                location=row["location"],
                element_index=int(row["element"]),
                bit_index=bit,
                mode=mode,
                sample_id=int(row["sample"]),
                seed=seed,
                value=corrupted if mode in VALUE_MODES else None,
            )
            records.append(
                InjectionRecord(
                    spec=spec,
                    original_value=_parse_num(row["orig"]),
                    corrupted_value=corrupted,
                    golden_loss=float(row["golden_loss"]),
                    corrupted_loss=float(row["corrupt_loss"]),
                    golden_class=-1,
                    corrupted_class=-1,
                    mismatch=bool(int(row["mismatch"])),
                    detected=None if row["detected"] == "" else bool(int(row["detected"])),
                    detection_layer=(
                        None if row["detection_layer"] == "" else int(row["detection_layer"])
                    ),
                )
            )
        return cls(records=records, seed=seed, n_per_layer=n_per_layer, skipped={})

    def summary_json(self) -> str:
        doc = {
            "seed": self.seed,
            "n_per_layer": self.n_per_layer,
            "skipped": {str(k): v for k, v in sorted(self.skipped.items())},
            "layers": {
                str(k): {
                    "injections": int(t["injections"]),
                    "mismatches": int(t["mismatches"]),
                }
                for k, t in sorted(self.layer_tallies().items())
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def _num(v) -> str:
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def _parse_num(s: str):
    try:
        return int(s)
    except ValueError:
        return float(s)


def _injection_rng(seed: int, layer_index: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, layer_index, k)))


def _run_layer_campaign(
    model: ModelGraph,
    golden: GoldenSet,
    ranges: RangeProfile,
    layer_index: int,
    n: int,
    modes: tuple[str, ...] | None,
    locations: tuple[str, ...],
    seed: int,
) -> tuple[int, list[InjectionRecord], int]:
    records: list[InjectionRecord] = []
    skipped = 0
    trace_cache: dict[int, ActivationTrace] = {}
    for k in range(n):
        rng = _injection_rng(seed, layer_index, k)
        sample_id = golden.sample_ids[int(rng.integers(len(golden)))]
        if sample_id not in trace_cache:
            trace_cache[sample_id] = forward(
                model,
                golden.input_for(sample_id),
                golden.labels[sample_id],
                tap=[layer_index],
            )
        trace = trace_cache[sample_id]
        try:
            spec = sample_injection(
                model,
                ranges,
                golden,
                rng,
                layer_index=layer_index,
                sample_id=sample_id,
                locations=locations,
                modes=modes,
                seed=seed,
                clean_trace=trace,
            )
        except SamplingError:
            skipped += 1
            continue
        records.append(
            inject_forward(
                model,
                golden.input_for(sample_id),
                golden.labels[sample_id],
                spec,
                clean_trace=trace,
            )
        )
    return layer_index, records, skipped


def run_campaign(
    model: ModelGraph,
    golden: GoldenSet,
    ranges: RangeProfile,
    n_per_layer: int,
    *,
    modes: tuple[str, ...] | None = None,
    locations: tuple[str, ...] = ("output",),
    seed: int = 0,
    workers: int = 1,
) -> CampaignResult:
    """Stratified campaign: n_per_layer injections into every layer.

    Reproducible for a fixed seed; sampling failures on degenerate ranges are
    skipped and reported per layer, not fatal.
    """
    if n_per_layer < 0:
        raise ValueError("n_per_layer must be >= 0")
    for loc in locations:
        if loc not in LOCATIONS:
            raise ValueError(f"unknown injection location {loc!r}")
    layer_indices = list(range(len(model.layers)))
    results: list[tuple[int, list[InjectionRecord], int]] = []
    if n_per_layer == 0:
        return CampaignResult(records=[], seed=seed, n_per_layer=0, skipped={})
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(
                    _run_layer_campaign,
                    model,
                    golden,
                    ranges,
                    li,
                    n_per_layer,
                    modes,
                    locations,
                    seed,
                )
                for li in layer_indices
            ]
            results = [f.result() for f in futures]
    else:
        results = [
            _run_layer_campaign(
                model, golden, ranges, li, n_per_layer, modes, locations, seed
            )
            for li in layer_indices
        ]
    results.sort(key=lambda item: item[0])
    records: list[InjectionRecord] = []
    skipped: dict[int, int] = {}
    for layer_index, recs, nskip in results:
        records.extend(recs)
        if nskip:
            skipped[layer_index] = nskip
    return CampaignResult(
        records=records, seed=seed, n_per_layer=n_per_layer, skipped=skipped
    )


def margin_of_error(n: int, p: float, confidence: float) -> float:
    """Two-sided normal-approximation margin: z(confidence) * sqrt(p(1-p)/n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    z = NormalDist().inv_cdf((1.0 + confidence) / 2.0)
    return z * math.sqrt(p * (1.0 - p) / n)
