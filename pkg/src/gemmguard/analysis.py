"""Vulnerability metrics, coverage/overhead curves, and protection planning.

Layer vulnerability is the product of an origination share (MAC fraction)
and a propagation rate (observed mismatch fraction).  Protection planning
greedily selects layers by vulnerability-per-cost; an exhaustive search is
available at small layer counts as the optimality oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from gemmguard.injector import CampaignResult
from gemmguard.model import LayerSpec, ModelGraph, mac_count

__all__ = [
    "LayerVulnerability",
    "ProtectionPlan",
    "CoverageCurve",
    "compute_v_orig",
    "compute_p_prop",
    "compute_delta_loss",
    "layer_vulnerabilities",
    "build_coverage_curve",
    "select_layers",
    "checksum_cost_model",
    "duplication_cost_model",
]


@dataclass
class LayerVulnerability:
    layer_index: int
    v_orig: float
    p_prop: float
    delta_loss: float
    v_layer: float


@dataclass
class ProtectionPlan:
    scheme: str  # "duplication" | "checksum"
    selected: tuple[int, ...]
    predicted_coverage: float
    compute_overhead: float
    memory_overhead: float
    head_always_included: bool

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "selected": list(self.selected),
            "predicted_coverage": self.predicted_coverage,
            "compute_overhead": self.compute_overhead,
            "memory_overhead": self.memory_overhead,
            "head_always_included": self.head_always_included,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ProtectionPlan":
        return cls(
            scheme=doc["scheme"],
            selected=tuple(doc["selected"]),
            predicted_coverage=doc["predicted_coverage"],
            compute_overhead=doc["compute_overhead"],
            memory_overhead=doc["memory_overhead"],
            head_always_included=doc["head_always_included"],
        )

    @classmethod
    def from_json(cls, text: str) -> "ProtectionPlan":
        return cls.from_dict(json.loads(text))


@dataclass
class CoverageCurve:
    """Cumulative (overhead, coverage) points as layers are added by value/cost."""

    points: list[tuple[float, float]]  # starts at (0, 0)
    order: list[int]  # layer positions in selection order

    def to_csv(self) -> str:
        lines = ["overhead,coverage"]
        lines += [f"{repr(o)},{repr(c)}" for o, c in self.points]
        return "\n".join(lines) + "\n"


def compute_v_orig(model: ModelGraph) -> np.ndarray:
    """MAC share of each layer; sums to 1."""
    macs = np.array([mac_count(L) for L in model.layers], dtype=np.float64)
    return macs / macs.sum()


def compute_p_prop(campaign: CampaignResult, layer_index: int) -> float:
    """Fraction of a layer's injections that flipped the predicted class."""
    tallies = campaign.layer_tallies().get(layer_index)
    if not tallies or tallies["injections"] == 0:
        raise ValueError(f"no injection records for layer {layer_index}")
    return tallies["mismatches"] / tallies["injections"]


def compute_delta_loss(campaign: CampaignResult, layer_index: int) -> float:
    """Mean loss shift (corrupted - golden); larger means more vulnerable."""
    tallies = campaign.layer_tallies().get(layer_index)
    if not tallies or tallies["injections"] == 0:
        raise ValueError(f"no injection records for layer {layer_index}")
    return tallies["loss_delta_sum"] / tallies["injections"]


def layer_vulnerabilities(
    model: ModelGraph, campaign: CampaignResult
) -> list[LayerVulnerability]:
    v_orig = compute_v_orig(model)
    out = []
    for L in model.layers:
        p = compute_p_prop(campaign, L.index)
        out.append(
            LayerVulnerability(
                layer_index=L.index,
                v_orig=float(v_orig[L.index]),
                p_prop=p,
                delta_loss=compute_delta_loss(campaign, L.index),
                v_layer=float(v_orig[L.index]) * p,
            )
        )
    return out


def _selection_order(vulns: np.ndarray, costs: np.ndarray) -> list[int]:
    """Descending value/cost ratio; ties by lower cost, then lower index."""
    with np.errstate(divide="ignore"):
        ratio = np.where(costs > 0, vulns / costs, np.inf)
    return sorted(range(len(vulns)), key=lambda i: (-ratio[i], costs[i], i))


def _prune(vulns, costs, need: float, selected: list[int]) -> list[int]:
    """Drop selected items (most expensive first) that coverage can spare."""
    kept = list(selected)
    cov = sum(float(vulns[i]) for i in kept)
    for i in sorted(kept, key=lambda j: (-costs[j], j)):
        if cov - float(vulns[i]) >= need:
            kept.remove(i)
            cov -= float(vulns[i])
    return kept


def _greedy_select(vulns, costs, need: float, items: list[int]) -> list[int]:
    """Ratio-ordered prefix, refined: at every prefix length, also consider
    completing with the cheapest single item that covers the residual, then
    prune redundant picks.  Still a heuristic; the exact mode is the oracle."""
    order = _selection_order(vulns[items], costs[items])
    ordered = [items[i] for i in order]
    candidates: list[list[int]] = []
    sel: list[int] = []
    cov = 0.0
    for j in range(len(ordered) + 1):
        residual = need - cov
        if residual <= 0:
            candidates.append(list(sel))
            break
        crossers = [i for i in ordered[j:] if float(vulns[i]) >= residual]
        if crossers:
            cheapest = min(crossers, key=lambda i: (costs[i], i))
            candidates.append(list(sel) + [cheapest])
        if j < len(ordered):
            sel.append(ordered[j])
            cov += float(vulns[ordered[j]])
    if not candidates:
        raise ValueError("coverage target unreachable")
    pruned = [_prune(vulns, costs, need, c) for c in candidates]

    def cost_of(s):
        return sum(float(costs[i]) for i in s)

    return min(pruned, key=lambda s: (cost_of(s), len(s), tuple(sorted(s))))


def build_coverage_curve(vulns, costs, scheme: str = "checksum") -> CoverageCurve:
    """Cumulative coverage vs cumulative overhead, layers added by value/cost.

    Coverage is normalized over the layers given (exclude the head before
    calling to reproduce the head-exclusive reporting convention).
    """
    vulns = np.asarray(vulns, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if vulns.shape != costs.shape or vulns.ndim != 1:
        raise ValueError("vulns and costs must be equal-length vectors")
    if (costs < 0).any():
        raise ValueError("costs must be nonnegative")
    total = vulns.sum()
    order = _selection_order(vulns, costs)
    points = [(0.0, 0.0)]
    cum_cost = 0.0
    cum_vuln = 0.0
    for i in order:
        cum_cost += float(costs[i])
        cum_vuln += float(vulns[i])
        points.append((cum_cost, cum_vuln / total if total > 0 else 0.0))
    return CoverageCurve(points=points, order=order)


def _subset_cost_coverage(vulns, costs, subset) -> tuple[float, float]:
    return float(sum(costs[i] for i in subset)), float(sum(vulns[i] for i in subset))


def select_layers(
    vulns,
    costs,
    target_coverage: float,
    *,
    head_index: int | None = None,
    method: str = "greedy",
    scheme: str = "checksum",
    total_compute: float | None = None,
    memory_costs=None,
    total_memory: float | None = None,
) -> ProtectionPlan:
    """Cheapest layer subset reaching the coverage target; the head is forced in.

    ``method="greedy"`` walks the value/cost ordering, considers completing
    every prefix with the cheapest single layer that covers the residual, and
    prunes redundant picks; ``method="exact"`` enumerates all subsets (allowed
    up to 20 layers) and is the optimality oracle for tests.  Coverage is
    measured against the sum of all layers' vulnerability.
    """
    vulns = np.asarray(vulns, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if not 0.0 < target_coverage <= 1.0:
        raise ValueError("target_coverage must lie in (0, 1]")
    if vulns.shape != costs.shape or vulns.ndim != 1:
        raise ValueError("vulns and costs must be equal-length vectors")
    n = len(vulns)
    total = float(vulns.sum())
    if total <= 0:
        raise ValueError("total vulnerability is zero")
    forced = {head_index} if head_index is not None else set()
    rest = [i for i in range(n) if i not in forced]

    if method == "greedy":
        selected = set(forced)
        covered = sum(float(vulns[i]) for i in forced)
        need = target_coverage * total - covered - 1e-12 * total
        if need > 0:
            picked = _greedy_select(vulns, costs, need, rest)
            selected |= set(picked)
            covered += sum(float(vulns[i]) for i in picked)
        if covered / total < target_coverage - 1e-12:
            raise ValueError(
                f"target coverage {target_coverage} unreachable (max {covered / total})"
            )
    elif method == "exact":
        if n > 20:
            raise ValueError("exact selection is limited to 20 layers")
        need = target_coverage * total - sum(float(vulns[i]) for i in forced)
        best = None
        for r in range(len(rest) + 1):
            for combo in combinations(rest, r):
                cost, cov = _subset_cost_coverage(vulns, costs, combo)
                if cov >= need - 1e-12 * total:
                    key = (cost, -cov, combo)
                    if best is None or key < best:
                        best = key
        if best is None:
            raise ValueError(f"target coverage {target_coverage} unreachable")
        selected = set(forced) | set(best[2])
        covered = sum(float(vulns[i]) for i in selected)
    else:
        raise ValueError(f"unknown selection method {method!r}")

    chosen = tuple(sorted(selected))
    sel_cost = float(sum(costs[i] for i in chosen))
    compute_overhead = sel_cost / total_compute if total_compute else sel_cost
    memory_overhead = 0.0
    if memory_costs is not None and total_memory:
        memory_overhead = float(sum(memory_costs[i] for i in chosen)) / total_memory
    return ProtectionPlan(
        scheme=scheme,
        selected=chosen,
        predicted_coverage=covered / total,
        compute_overhead=compute_overhead,
        memory_overhead=memory_overhead,
        head_always_included=head_index is not None,
    )


# ---------------------------------------------------------------------------
# cost models (flops count one per add/multiply; a duplicated MAC is two flops)


def checksum_cost_model(layer: LayerSpec) -> tuple[float, float]:
    """(compute flops, memory elements) of checksum verification for one layer.

    Compute: input row-reduce + output row-reduce + the checksum dot product,
    per sample.  Memory: stored offline weight checksum plus the two online
    checksum vectors.
    """
    compute = layer.tokens * (2 * layer.in_dim + layer.out_dim)
    memory = layer.in_dim + 2 * layer.tokens
    return float(compute), float(memory)


def duplication_cost_model(layer: LayerSpec) -> tuple[float, float]:
    """(compute flops, memory elements) of fully duplicating one layer."""
    compute = 2 * mac_count(layer)
    memory = layer.in_dim * layer.out_dim + layer.out_dim + layer.tokens * layer.out_dim
    return float(compute), float(memory)


def model_totals(model: ModelGraph) -> tuple[float, float]:
    """(total forward flops, total resident elements) of the whole model."""
    compute = float(sum(2 * mac_count(L) for L in model.layers))
    memory = float(
        sum(L.in_dim * L.out_dim + L.out_dim + L.tokens * L.out_dim for L in model.layers)
    )
    return compute, memory
