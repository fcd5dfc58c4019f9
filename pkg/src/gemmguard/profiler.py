"""Pre-injection pipeline stages: activation-range profiling and golden-set selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from gemmguard.model import Dataset, ModelGraph, forward

__all__ = ["RangeProfile", "GoldenSet", "profile_ranges", "select_golden"]


@dataclass
class RangeProfile:
    """Exact per-layer (min, max) of raw GEMM outputs observed over a dataset."""

    bounds: dict[int, tuple[float, float]] = field(default_factory=dict)

    def min(self, layer_index: int) -> float:
        return self.bounds[layer_index][0]

    def max(self, layer_index: int) -> float:
        return self.bounds[layer_index][1]

    def span(self, layer_index: int) -> float:
        lo, hi = self.bounds[layer_index]
        return hi - lo

    def to_dict(self) -> dict:
        return {str(i): {"min": lo, "max": hi} for i, (lo, hi) in sorted(self.bounds.items())}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RangeProfile":
        return cls({int(k): (float(v["min"]), float(v["max"])) for k, v in doc.items()})

    @classmethod
    def from_json(cls, text: str) -> "RangeProfile":
        return cls.from_dict(json.loads(text))


@dataclass
class GoldenSet:
    """Samples the clean model classifies correctly, with their golden losses."""

    dataset: Dataset
    sample_ids: list[int]
    labels: dict[int, int]
    losses: dict[int, float]

    def __len__(self) -> int:
        return len(self.sample_ids)

    def input_for(self, sample_id: int):
        return self.dataset.inputs[sample_id]


def profile_ranges(model: ModelGraph, dataset: Dataset) -> RangeProfile:
    """Scan every sample, recording exact min/max of each layer's raw output."""
    if len(dataset) == 0:
        raise ValueError("profile_ranges requires a nonempty dataset")
    all_layers = range(len(model.layers))
    bounds: dict[int, tuple[float, float]] = {}
    for x in dataset.inputs:
        trace = forward(model, x, label=0, tap=all_layers)
        for idx in all_layers:
            out = trace.outputs[idx].widened()
            if not model.is_integer and not np.isfinite(out).all():
                raise ValueError(f"non-finite activation in layer {idx}")
            lo, hi = float(out.min()), float(out.max())
            if idx in bounds:
                plo, phi = bounds[idx]
                bounds[idx] = (min(plo, lo), max(phi, hi))
            else:
                bounds[idx] = (lo, hi)
    return RangeProfile(bounds)


def select_golden(model: ModelGraph, dataset: Dataset) -> GoldenSet:
    """Keep exactly the correctly-classified samples; error if none qualify."""
    if len(dataset) == 0:
        raise ValueError("select_golden requires a nonempty dataset")
    ids, labels, losses = [], {}, {}
    for sid, x, label in zip(dataset.ids, dataset.inputs, dataset.labels):
        trace = forward(model, x, label=label)
        if trace.predicted_class == label:
            ids.append(sid)
            labels[sid] = label
            losses[sid] = trace.loss
    if not ids:
        raise ValueError("golden set is empty: model and dataset labels disagree everywhere")
    return GoldenSet(dataset=dataset, sample_ids=ids, labels=labels, losses=losses)
