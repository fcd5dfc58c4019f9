"""Checksum-based error detection for GEMM layers, with calibrated thresholds.

The detector compares, per input row b, the checksum prediction
``X[b,:] . w_sum + bias_sum`` against the observed activation sum
``sum_o Y[b,o]``.  In exact arithmetic the two are identical; floating-point
execution leaves a small discrepancy whose distribution is calibrated on
clean runs, and detection thresholds are placed at a chosen confidence on
that distribution.  Integer layers use exact equality.

Verification always runs on the raw GEMM output, before any nonlinearity,
because the checksum identity only holds for the linear part.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from statistics import NormalDist

import numpy as np

from gemmguard.errors import CalibrationError, GuardError
from gemmguard.injector import (
    InjectionRecord,
    InjectionSpec,
    corrupted_value_for,
    sample_injection,
)
from gemmguard.errors import SamplingError
from gemmguard.model import (
    ActivationTrace,
    LayerSpec,
    ModelGraph,
    finish_layer_output,
    forward,
    loss_from_logits,
    mac_count,
    prepare_layer_input,
    run_layer,
    working_array,
)
from gemmguard.numerics import INT_DTYPES, Matrix2D, Precision
from gemmguard.profiler import GoldenSet, RangeProfile

__all__ = [
    "WeightChecksum",
    "EpsilonModel",
    "DetectionOutcome",
    "CorrectionPolicy",
    "GuardEvent",
    "DetectionReport",
    "offline_checksum",
    "verify_layer",
    "threshold_from_confidence",
    "calibrate_epsilon",
    "choose_checksum_precision",
    "detection_guarantee",
    "protected_forward",
    "evaluate_detection",
    "epsilon_models_to_json",
    "epsilon_models_from_json",
    "epsilon_models_to_dict",
    "epsilon_models_from_dict",
]

_MIN_CALIBRATION_SAMPLES = 30


@dataclass
class WeightChecksum:
    """Offline column checksum of one layer's stored (transposed) weight."""

    layer_index: int
    w_sum: np.ndarray  # length in_dim: w_sum[k] = sum_o Wt[k, o]
    bias_sum: float
    precision: Precision


@dataclass
class EpsilonModel:
    """Per-layer fit of clean-run checksum discrepancies."""

    layer_index: int
    mu: float
    sigma: float
    confidence: float
    threshold_low: float
    threshold_high: float
    n_samples: int
    precision: Precision
    statistic: str = "per_sample"  # or "batch_mean"
    d_abs_max: float = 0.0  # largest |d| seen during calibration

    @property
    def width(self) -> float:
        return self.threshold_high - self.threshold_low


@dataclass
class DetectionOutcome:
    layer_index: int
    d: np.ndarray
    flagged: list[int]
    max_discrepancy: float
    triggered: bool


@dataclass
class CorrectionPolicy:
    """What to do when a protected layer's check trips."""

    kind: str  # replay | skip_same_size | skip_next_block | skip_to_head
    max_replays: int = 3

    def __post_init__(self):
        if self.kind not in ("replay", "skip_same_size", "skip_next_block", "skip_to_head"):
            raise ValueError(f"unknown correction kind {self.kind!r}")
        if self.kind == "replay" and self.max_replays < 1:
            raise ValueError("replay policy requires max_replays >= 1")


@dataclass
class GuardEvent:
    layer_index: int
    action: str  # check | detect | replay | replay_numerical | skip
    triggered: bool
    max_discrepancy: float
    flagged_rows: int = 0
    replays: int = 0
    skip_target: int | None = None


def _accumulate_in(arr: np.ndarray, p: Precision, axis: int) -> np.ndarray:
    acc = arr.astype(p.accumulator_dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.add.accumulate(acc, axis=axis)
    return np.take(out, -1, axis=axis)


def offline_checksum(layer: LayerSpec, p: Precision) -> WeightChecksum:
    """w_sum[k] = sum_o Wt[k,o] and the bias total, accumulated in ``p``.

    Integer layers must use the int64-exact precision: narrower accumulators
    risk overflow on wide layers.
    """
    integer = layer.weight.dtype in INT_DTYPES
    if integer and p is not Precision.INT64:
        raise ValueError("integer layers require the int64-exact checksum precision")
    if not integer and p is Precision.INT64:
        raise ValueError("int64-exact checksums only apply to integer layers")
    w_sum = _accumulate_in(layer.weight.widened(), p, axis=1)
    bias_sum = _accumulate_in(np.asarray(layer.bias), p, axis=0)
    return WeightChecksum(
        layer_index=layer.index,
        w_sum=w_sum,
        bias_sum=int(bias_sum) if integer else float(bias_sum),
        precision=p,
    )


def _discrepancies(x: np.ndarray, y: np.ndarray, chk: WeightChecksum) -> np.ndarray:
    """Per-row d[b] = predicted[b] - observed[b] in the checksum precision."""
    p = chk.precision
    acc = p.accumulator_dtype
    with np.errstate(over="ignore", invalid="ignore"):
        products = x.astype(acc) * chk.w_sum.astype(acc)[None, :]
        predicted = _accumulate_in(products, p, axis=1) + acc.type(chk.bias_sum)
        observed = _accumulate_in(y, p, axis=1)
        return (predicted - observed).astype(np.int64 if p is Precision.INT64 else np.float64)


def verify_layer(
    X: Matrix2D,
    Y: Matrix2D,
    chk: WeightChecksum,
    eps: EpsilonModel | None = None,
) -> DetectionOutcome:
    """Check one layer execution; integer layers demand exact equality."""
    if X.rows != Y.rows:
        raise ValueError(f"X has {X.rows} rows but Y has {Y.rows}")
    if X.cols != chk.w_sum.shape[0]:
        raise ValueError(f"X has {X.cols} cols but checksum covers {chk.w_sum.shape[0]}")
    return _verify_arrays(X.widened(), Y.widened(), chk, eps)


def _verify_arrays(
    x: np.ndarray, y: np.ndarray, chk: WeightChecksum, eps: EpsilonModel | None
) -> DetectionOutcome:
    d = _discrepancies(x, y, chk)
    if chk.precision is Precision.INT64:
        flags = d != 0
        max_disc = float(np.abs(d).max())
    else:
        if eps is None:
            raise ValueError("floating-point verification requires an epsilon model")
        if eps.statistic == "batch_mean":
            dm = float(d.mean())
            inside = eps.threshold_low <= dm <= eps.threshold_high
            flags = np.full(d.shape, not inside)
        else:
            # negated inside-test so non-finite discrepancies always flag
            flags = ~((d >= eps.threshold_low) & (d <= eps.threshold_high))
        with np.errstate(invalid="ignore"):
            gaps = np.abs(d - eps.mu)
        max_disc = float(np.nanmax(gaps)) if np.isfinite(gaps).any() else math.inf
    flagged = [int(i) for i in np.flatnonzero(flags)]
    return DetectionOutcome(
        layer_index=chk.layer_index,
        d=d,
        flagged=flagged,
        max_discrepancy=max_disc,
        triggered=bool(flags.any()),
    )


def threshold_from_confidence(
    mu: float, sigma: float, confidence: float
) -> tuple[float, float]:
    """Two-sided interval mu +/- z*sigma at the given confidence level."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if not 0.5 < confidence < 1.0:
        raise ValueError("confidence must lie in (0.5, 1)")
    z = NormalDist().inv_cdf((1.0 + confidence) / 2.0)
    return (mu - z * sigma, mu + z * sigma)


def choose_checksum_precision(
    model: ModelGraph, ranges: RangeProfile
) -> dict[int, Precision]:
    """Escalate each layer's checksum precision until overflow headroom and a
    rounding-error budget both hold; integer layers always get int64-exact.

    The magnitude proxy is (in_dim + out_dim) * max |value| over weights,
    bias, and the profiled output range; it must stay 2^10 below the
    precision's max finite value, and the first-order rounding bound
    n*u*magnitude must stay below 1e-3 of the profiled span.
    """
    out: dict[int, Precision] = {}
    for L in model.layers:
        if model.is_integer:
            out[L.index] = Precision.INT64
            continue
        lo, hi = ranges.bounds[L.index]
        vmax = max(
            float(np.abs(L.weight.widened()).max()),
            float(np.abs(L.bias).max()),
            abs(lo),
            abs(hi),
            1.0,
        )
        n = L.in_dim + L.out_dim
        magnitude = n * vmax
        span = max(hi - lo, 1e-30)
        chosen = None
        for p in (Precision.BINARY16, Precision.BINARY32, Precision.BINARY64):
            info = np.finfo(p.accumulator_dtype)
            headroom = magnitude < 2.0**-10 * float(info.max)
            rounding = n * (float(info.eps) / 2.0) * magnitude < 1e-3 * span
            if headroom and rounding:
                chosen = p
                break
        if chosen is None:
            warnings.warn(
                f"layer {L.index}: no floating precision meets the checksum error "
                "budget; falling back to binary64",
                RuntimeWarning,
                stacklevel=2,
            )
            chosen = Precision.BINARY64
        out[L.index] = chosen
    return out


def calibrate_epsilon(
    model: ModelGraph,
    golden: GoldenSet,
    layers: list[int] | None = None,
    precisions: Precision | dict[int, Precision] = Precision.BINARY64,
    confidence: float = 0.9999,
    per_sample: bool = True,
) -> dict[int, EpsilonModel]:
    """Fit per-layer discrepancy distributions over clean golden-set runs.

    ``per_sample=True`` collects one d value per input row, matching the
    row-granular detection in verify_layer; ``per_sample=False`` collects the
    per-inference batch average instead.  Integer layers degenerate to exact
    equality (mu = sigma = 0).
    """
    if len(golden) == 0:
        raise ValueError("calibration requires a nonempty golden set")
    layer_indices = list(layers) if layers is not None else [L.index for L in model.layers]
    chks = {
        i: offline_checksum(model.layers[i], _precision_for(precisions, i, model))
        for i in layer_indices
    }
    collected: dict[int, list[float]] = {i: [] for i in layer_indices}
    for sid in golden.sample_ids:
        trace = forward(model, golden.input_for(sid), golden.labels[sid], tap=layer_indices)
        for i in layer_indices:
            d = _discrepancies(
                trace.inputs[i].widened(), trace.outputs[i].widened(), chks[i]
            )
            if per_sample:
                collected[i].extend(float(v) for v in d)
            else:
                collected[i].append(float(np.mean(d)))

    models: dict[int, EpsilonModel] = {}
    statistic = "per_sample" if per_sample else "batch_mean"
    for i in layer_indices:
        values = np.array(collected[i], dtype=np.float64)
        p = chks[i].precision
        if p is Precision.INT64:
            if np.any(values != 0):
                raise CalibrationError(
                    f"layer {i}: integer checksum discrepancies are nonzero on clean runs"
                )
            models[i] = EpsilonModel(
                layer_index=i,
                mu=0.0,
                sigma=0.0,
                confidence=confidence,
                threshold_low=0.0,
                threshold_high=0.0,
                n_samples=len(values),
                precision=p,
                statistic=statistic,
            )
            continue
        if len(values) < _MIN_CALIBRATION_SAMPLES:
            raise CalibrationError(
                f"layer {i}: {len(values)} discrepancy samples < {_MIN_CALIBRATION_SAMPLES}"
            )
        mu = float(values.mean())
        sigma = float(values.std(ddof=1))
        if sigma == 0.0 and np.any(values != 0.0):
            raise CalibrationError(
                f"layer {i}: constant nonzero discrepancy (precision saturation)"
            )
        low, high = threshold_from_confidence(mu, sigma, confidence)
        models[i] = EpsilonModel(
            layer_index=i,
            mu=mu,
            sigma=sigma,
            confidence=confidence,
            threshold_low=low,
            threshold_high=high,
            n_samples=len(values),
            precision=p,
            statistic=statistic,
            d_abs_max=float(np.abs(values).max()),
        )
    return models


def _precision_for(
    precisions: Precision | dict[int, Precision], layer_index: int, model: ModelGraph
) -> Precision:
    if model.is_integer:
        return Precision.INT64
    if isinstance(precisions, Precision):
        return precisions
    return precisions[layer_index]


def detection_guarantee(eps: EpsilonModel, layer: LayerSpec, ranges: RangeProfile) -> float:
    """Shift magnitude above which an output corruption is provably detected.

    A corruption that changes a row's activation sum by more than the
    threshold width plus the rounding bound must land outside the interval:
    the clean row's discrepancy never exceeded |mu| + d_abs_max during
    calibration, and the remaining slack covers re-summation rounding of the
    corrupted row.  Valid for output-location faults on inputs drawn from the
    calibration set.
    """
    if eps.precision is Precision.INT64:
        return 0.0
    o = layer.out_dim
    lo, hi = ranges.bounds[layer.index]
    u = float(np.finfo(eps.precision.accumulator_dtype).eps) / 2.0
    slack = 4.0 * o * o * u * (max(abs(lo), abs(hi)) + (hi - lo) + 1.0)
    return eps.width + abs(eps.mu) + eps.d_abs_max + slack


def epsilon_models_to_dict(models: dict[int, EpsilonModel]) -> dict:
    return {
        str(i): {
            "mu": m.mu,
            "sigma": m.sigma,
            "confidence": m.confidence,
            "threshold_low": m.threshold_low,
            "threshold_high": m.threshold_high,
            "n": m.n_samples,
            "precision": m.precision.value,
            "statistic": m.statistic,
            "d_abs_max": m.d_abs_max,
        }
        for i, m in sorted(models.items())
    }


def epsilon_models_to_json(models: dict[int, EpsilonModel]) -> str:
    return json.dumps(epsilon_models_to_dict(models), indent=2, sort_keys=True)


def epsilon_models_from_dict(doc: dict) -> dict[int, EpsilonModel]:
    out = {}
    for key, m in doc.items():
        i = int(key)
        out[i] = EpsilonModel(
            layer_index=i,
            mu=m["mu"],
            sigma=m["sigma"],
            confidence=m["confidence"],
            threshold_low=m["threshold_low"],
            threshold_high=m["threshold_high"],
            n_samples=m["n"],
            precision=Precision.from_tag(m["precision"]),
            statistic=m["statistic"],
            d_abs_max=m["d_abs_max"],
        )
    return out


def epsilon_models_from_json(text: str) -> dict[int, EpsilonModel]:
    return epsilon_models_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# protected execution


def _skip_target(model: ModelGraph, policy: CorrectionPolicy, layer: LayerSpec) -> int:
    later = model.layers[layer.index + 1 :]
    if policy.kind == "skip_same_size":
        for cand in later:
            if cand.in_dim == layer.in_dim:
                return cand.index
        raise GuardError(f"layer {layer.index}: no later layer with input size {layer.in_dim}")
    if policy.kind == "skip_next_block":
        for cand in later:
            if cand.kind == "qkv":
                return cand.index
        raise GuardError(f"layer {layer.index}: no later block to skip to")
    head = model.layers[-1]
    if head.index == layer.index or head.in_dim != layer.in_dim:
        raise GuardError(
            f"layer {layer.index}: saved activation ({layer.in_dim}) does not fit the head"
        )
    return head.index


def protected_forward(
    model: ModelGraph,
    x: Matrix2D,
    label: int,
    protected,
    chks: dict[int, WeightChecksum],
    eps_models: dict[int, EpsilonModel],
    policy: CorrectionPolicy | None = None,
    *,
    inject: InjectionSpec | None = None,
    tap: tuple[int, ...] = (),
    record_all: bool = False,
) -> tuple[ActivationTrace, list[GuardEvent]]:
    """Forward pass with per-layer verification and optional correction.

    ``policy=None`` runs detect-only: triggers are logged and the (possibly
    corrupted) values flow on.  Replay recomputes the layer from its saved
    verified input; a recompute that reproduces the flagged output bit-for-bit
    is classified as numerical imprecision (transient faults do not repeat)
    and accepted.  Skip policies route the saved input past the faulty layer.

    Only one saved activation (the current layer's input state) is held at a
    time, so the space overhead is constant.
    """
    protected_set = set(getattr(protected, "selected", protected))
    for i in protected_set:
        if i not in chks or i not in eps_models:
            raise ValueError(f"protected layer {i} lacks a checksum or epsilon model")
    tapped = frozenset(tap)
    events: list[GuardEvent] = []
    h = working_array(model, x)
    inputs: dict[int, Matrix2D] = {}
    outputs: dict[int, Matrix2D] = {}
    injected_done = False
    i = 0
    while i < len(model.layers):
        layer = model.layers[i]
        xin = prepare_layer_input(model, layer, h)
        weight = layer.weight
        if inject is not None and inject.layer_index == i and not injected_done:
            if inject.location == "input":
                xin = xin.copy()
                flat = xin.reshape(-1)
                orig = flat[inject.element_index]
                flat[inject.element_index] = corrupted_value_for(
                    inject, _scalar(orig, model.dtype), model.dtype
                )
                injected_done = True
            elif inject.location == "weight":
                wdata = weight.data.copy()
                flat = wdata.reshape(-1)
                orig = flat[inject.element_index]
                flat[inject.element_index] = corrupted_value_for(
                    inject, _scalar(orig, model.dtype), model.dtype
                )
                weight = Matrix2D(wdata, model.dtype, _trusted=True)
                injected_done = True
        scratch = replace(layer, weight=weight) if weight is not layer.weight else layer
        y = run_layer(model, scratch, xin)
        if inject is not None and inject.layer_index == i and not injected_done:
            if inject.location == "output":
                flat = y.reshape(-1)
                odtype = "int32" if model.is_integer else model.dtype
                orig = flat[inject.element_index]
                flat[inject.element_index] = corrupted_value_for(
                    inject, _scalar(orig, odtype), odtype
                )
                injected_done = True

        skip_to: int | None = None
        if i in protected_set:
            outcome = _verify_arrays(xin, y, chks[i], eps_models[i])
            nflag = len(outcome.flagged)
            if record_all and not outcome.triggered:
                events.append(GuardEvent(i, "check", False, outcome.max_discrepancy))
            if outcome.triggered:
                if policy is None:
                    events.append(
                        GuardEvent(i, "detect", True, outcome.max_discrepancy, nflag)
                    )
                elif policy.kind == "replay":
                    y, event = _replay(model, layer, xin, y, outcome, chks[i], eps_models[i], policy)
                    events.append(event)
                else:
                    skip_to = _skip_target(model, policy, layer)
                    events.append(
                        GuardEvent(
                            i,
                            "skip",
                            True,
                            outcome.max_discrepancy,
                            nflag,
                            skip_target=skip_to,
                        )
                    )
        if skip_to is not None:
            i = skip_to  # h still holds the saved, verified input state
            continue
        if i in tapped:
            inputs[i] = Matrix2D(xin, model.dtype, _trusted=True)
            outputs[i] = Matrix2D(y, "int32" if model.is_integer else model.dtype, _trusted=True)
        h = finish_layer_output(model, layer, y)
        i += 1
    logits = h[0].astype(np.float64)
    trace = ActivationTrace(
        logits=logits,
        predicted_class=int(np.argmax(logits)),
        loss=loss_from_logits(logits, label),
        label=label,
        inputs=inputs,
        outputs=outputs,
    )
    return trace, events


def _scalar(v, dtype: str):
    return int(v) if dtype in INT_DTYPES else float(v)


def _replay(
    model: ModelGraph,
    layer: LayerSpec,
    xin: np.ndarray,
    flagged_y: np.ndarray,
    first_outcome: DetectionOutcome,
    chk: WeightChecksum,
    eps: EpsilonModel,
    policy: CorrectionPolicy,
) -> tuple[np.ndarray, GuardEvent]:
    previous = flagged_y
    disc = first_outcome.max_discrepancy
    nflag = len(first_outcome.flagged)
    for attempt in range(1, policy.max_replays + 1):
        y = run_layer(model, layer, xin)
        if y.tobytes() == previous.tobytes():
            # deterministic recompute reproduced the value: numerical, not transient
            return y, GuardEvent(
                layer.index, "replay_numerical", True, disc, nflag, replays=attempt
            )
        outcome = _verify_arrays(xin, y, chk, eps)
        if not outcome.triggered:
            return y, GuardEvent(layer.index, "replay", True, disc, nflag, replays=attempt)
        previous = y
        disc = outcome.max_discrepancy
        nflag = len(outcome.flagged)
    raise GuardError(
        f"layer {layer.index}: replay budget ({policy.max_replays}) exhausted; "
        "persistent fault suspected"
    )


# ---------------------------------------------------------------------------
# detection evaluation


@dataclass
class DetectionReport:
    """Detect-only campaign results plus a clean-pass false-positive audit."""

    records: list[InjectionRecord]
    true_positives: int
    false_negatives: int
    benign_detections: int
    true_negatives: int
    clean_inferences: int
    clean_checks: int
    clean_false_positive_checks: int
    clean_false_positive_inferences: int
    thresholds: dict[int, EpsilonModel]
    discrepancies: dict[int, float]  # record position -> observed |d - mu| at the layer
    replay_overhead_mean: float

    @property
    def coverage(self) -> float:
        caught = self.true_positives + self.false_negatives
        return self.true_positives / caught if caught else 1.0

    @property
    def false_positive_rate(self) -> float:
        return (
            self.clean_false_positive_checks / self.clean_checks if self.clean_checks else 0.0
        )

    def to_csv(self) -> str:
        lines = ["layer,discrepancy,mismatch,detected"]
        for pos, rec in enumerate(self.records):
            disc = self.discrepancies.get(pos)
            lines.append(
                f"{rec.spec.layer_index},{'' if disc is None else repr(disc)},"
                f"{int(rec.mismatch)},{'' if rec.detected is None else int(rec.detected)}"
            )
        return "\n".join(lines) + "\n"

    def thresholds_csv(self) -> str:
        lines = ["layer,mu,sigma,threshold_low,threshold_high"]
        for i, m in sorted(self.thresholds.items()):
            lines.append(
                f"{i},{repr(m.mu)},{repr(m.sigma)},"
                f"{repr(m.threshold_low)},{repr(m.threshold_high)}"
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "injections": len(self.records),
            "true_positives": self.true_positives,
            "false_negatives": self.false_negatives,
            "benign_detections": self.benign_detections,
            "true_negatives": self.true_negatives,
            "coverage_of_mismatches": self.coverage,
            "clean_inferences": self.clean_inferences,
            "clean_checks": self.clean_checks,
            "clean_false_positive_checks": self.clean_false_positive_checks,
            "clean_false_positive_inferences": self.clean_false_positive_inferences,
            "false_positive_rate": self.false_positive_rate,
            "replay_overhead_mean": self.replay_overhead_mean,
        }


def evaluate_detection(
    model: ModelGraph,
    golden: GoldenSet,
    protected,
    chks: dict[int, WeightChecksum],
    eps_models: dict[int, EpsilonModel],
    ranges: RangeProfile,
    *,
    n_per_layer: int,
    modes: tuple[str, ...] | None = None,
    seed: int = 0,
    clean_passes: int | None = None,
) -> DetectionReport:
    """Run a detect-only injection campaign plus a clean false-positive pass.

    Injections go to layer outputs (the profiled targets); detection means the
    injected layer's own check tripped.  The clean pass counts per-row check
    decisions that flag, which is the detector's false-positive rate.
    """
    protected_set = set(getattr(protected, "selected", protected))
    records: list[InjectionRecord] = []
    discrepancies: dict[int, float] = {}
    replay_costs: list[float] = []
    total_flops = float(sum(2 * mac_count(L) for L in model.layers))

    for layer_index in range(len(model.layers)):
        trace_cache: dict[int, ActivationTrace] = {}
        for k in range(n_per_layer):
            rng = np.random.default_rng(np.random.SeedSequence((seed, layer_index, k)))
            sid = golden.sample_ids[int(rng.integers(len(golden)))]
            if sid not in trace_cache:
                trace_cache[sid] = forward(
                    model, golden.input_for(sid), golden.labels[sid], tap=[layer_index]
                )
            clean = trace_cache[sid]
            try:
                spec = sample_injection(
                    model,
                    ranges,
                    golden,
                    rng,
                    layer_index=layer_index,
                    sample_id=sid,
                    modes=modes,
                    seed=seed,
                    clean_trace=clean,
                )
            except SamplingError:
                continue
            trace, events = protected_forward(
                model,
                golden.input_for(sid),
                golden.labels[sid],
                protected_set,
                chks,
                eps_models,
                policy=None,
                inject=spec,
                record_all=True,
            )
            detected = False
            detection_layer = None
            for ev in events:
                if ev.layer_index == layer_index:
                    if ev.triggered:
                        detected = True
                        detection_layer = layer_index
                    discrepancies[len(records)] = ev.max_discrepancy
            flat = clean.outputs[layer_index].widened().ravel()
            original = _scalar(
                flat[spec.element_index], "int32" if model.is_integer else model.dtype
            )
            corrupted = corrupted_value_for(
                spec, original, "int32" if model.is_integer else model.dtype
            )
            records.append(
                InjectionRecord(
                    spec=spec,
                    original_value=original,
                    corrupted_value=corrupted,
                    golden_loss=clean.loss,
                    corrupted_loss=trace.loss,
                    golden_class=clean.predicted_class,
                    corrupted_class=trace.predicted_class,
                    mismatch=trace.predicted_class != clean.predicted_class,
                    detected=detected if layer_index in protected_set else False,
                    detection_layer=detection_layer,
                )
            )
            if detected:
                replay_costs.append(2 * mac_count(model.layers[layer_index]) / total_flops)

    tp = sum(1 for r in records if r.mismatch and r.detected)
    fn = sum(1 for r in records if r.mismatch and not r.detected)
    benign = sum(1 for r in records if not r.mismatch and r.detected)
    tn = sum(1 for r in records if not r.mismatch and not r.detected)

    n_clean = clean_passes if clean_passes is not None else len(golden)
    fp_checks = 0
    total_checks = 0
    fp_inferences = 0
    for sid in golden.sample_ids[:n_clean]:
        _, events = protected_forward(
            model,
            golden.input_for(sid),
            golden.labels[sid],
            protected_set,
            chks,
            eps_models,
            policy=None,
            record_all=True,
        )
        flagged_any = False
        for ev in events:
            total_checks += model.layers[ev.layer_index].tokens  # one decision per row
            fp_checks += ev.flagged_rows
            flagged_any = flagged_any or ev.triggered
        fp_inferences += int(flagged_any)

    return DetectionReport(
        records=records,
        true_positives=tp,
        false_negatives=fn,
        benign_detections=benign,
        true_negatives=tn,
        clean_inferences=n_clean,
        clean_checks=total_checks,
        clean_false_positive_checks=fp_checks,
        clean_false_positive_inferences=fp_inferences,
        thresholds={i: eps_models[i] for i in sorted(protected_set)},
        discrepancies=discrepancies,
        replay_overhead_mean=(
            float(np.mean(replay_costs)) if replay_costs else 0.0
        ),
    )
