"""Batch front-end: one subcommand per pipeline stage, JSON config, file artifacts.

Stages write deterministic artifacts into the output directory; every artifact
embeds the config hash and the seeds, so reruns with an identical config are
byte-identical.  Exit codes: 0 success, 2 config error, 3 missing upstream
stage, 4 runtime numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from gemmguard.analysis import (
    ProtectionPlan,
    build_coverage_curve,
    checksum_cost_model,
    compute_v_orig,
    duplication_cost_model,
    layer_vulnerabilities,
    model_totals,
    select_layers,
)
from gemmguard.errors import ConfigError, StageError, WorkbenchError
from gemmguard.guard import (
    calibrate_epsilon,
    choose_checksum_precision,
    epsilon_models_from_dict,
    epsilon_models_to_dict,
    evaluate_detection,
    offline_checksum,
)
from gemmguard.injector import CampaignResult, margin_of_error, run_campaign
from gemmguard.model import ModelGraph, build_toy_model, make_synthetic_dataset
from gemmguard.numerics import Precision
from gemmguard.profiler import RangeProfile, profile_ranges, select_golden
from gemmguard.weights_io import load_weights

STAGES = ("profile", "inject", "analyze", "calibrate", "plan", "evaluate", "report")

_DEFAULT_GUARD = {
    "confidence": 0.9999,
    "precision": "auto",
    "target_coverage": 0.99,
    "per_sample": True,
}
_DEFAULT_CORRECTION = {"kind": "replay", "max_replays": 3}


@dataclass
class WorkbenchConfig:
    """Validated workbench configuration; seeds are always explicit."""

    model: dict
    dataset: dict
    campaign: dict
    guard: dict
    correction: dict
    output_dir: str
    raw: dict

    @classmethod
    def from_file(cls, path: str) -> "WorkbenchConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "WorkbenchConfig":
        for key in ("model", "dataset", "campaign", "output_dir"):
            if key not in raw:
                raise ConfigError(f"config missing required section {key!r}")
        model = raw["model"]
        if "path" in model:
            if not Path(model["path"]).exists():
                raise ConfigError(f"model weights not found: {model['path']}")
        else:
            for key in ("blocks", "dim", "tokens", "classes", "seed"):
                if key not in model:
                    raise ConfigError(f"synthetic model spec missing {key!r}")
        for key in ("size", "seed"):
            if key not in raw["dataset"]:
                raise ConfigError(f"dataset spec missing {key!r}")
        for key in ("n_per_layer", "seed"):
            if key not in raw["campaign"]:
                raise ConfigError(f"campaign spec missing {key!r}")
        guard = {**_DEFAULT_GUARD, **raw.get("guard", {})}
        correction = {**_DEFAULT_CORRECTION, **raw.get("correction", {})}
        return cls(
            model=model,
            dataset=raw["dataset"],
            campaign=raw["campaign"],
            guard=guard,
            correction=correction,
            output_dir=raw["output_dir"],
            raw=raw,
        )

    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def seeds(self) -> dict:
        return {
            "model": self.model.get("seed"),
            "dataset": self.dataset["seed"],
            "campaign": self.campaign["seed"],
        }

    def build_model(self) -> ModelGraph:
        if "path" in self.model:
            return load_weights(self.model["path"])
        return build_toy_model(
            blocks=self.model["blocks"],
            dim=self.model["dim"],
            tokens=self.model["tokens"],
            classes=self.model["classes"],
            seed=self.model["seed"],
            dtype=self.model.get("dtype", "binary32"),
        )

    def build_golden(self, model: ModelGraph):
        dataset = make_synthetic_dataset(model, self.dataset["size"], self.dataset["seed"])
        return select_golden(model, dataset)

    def campaign_modes(self) -> tuple[str, ...] | None:
        modes = self.campaign.get("modes")
        return tuple(modes) if modes else None


def _out_dir(cfg: WorkbenchConfig, override: str | None) -> Path:
    out = override or os.environ.get("GEMMGUARD_OUT") or cfg.output_dir
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc: dict, cfg: WorkbenchConfig) -> None:
    full = {"config_hash": cfg.config_hash(), "seeds": cfg.seeds(), **doc}
    path.write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, text: str, cfg: WorkbenchConfig) -> None:
    seeds = json.dumps(cfg.seeds(), sort_keys=True, separators=(",", ":"))
    path.write_text(f"# config_hash={cfg.config_hash()} seeds={seeds}\n" + text)


def _read_csv(path: Path) -> str:
    lines = path.read_text().splitlines(keepends=True)
    return "".join(line for line in lines if not line.startswith("#"))


def _require(out: Path, filename: str, producer: str) -> Path:
    path = out / filename
    if not path.exists():
        raise StageError(f"missing artifact {filename}: run the `{producer}` stage first")
    return path


def _payload(path: Path, key: str) -> dict:
    return json.loads(path.read_text())[key]


# ---------------------------------------------------------------------------
# stages


def run_profile(cfg: WorkbenchConfig, out: Path, workers: int) -> None:
    model = cfg.build_model()
    dataset = make_synthetic_dataset(model, cfg.dataset["size"], cfg.dataset["seed"])
    ranges = profile_ranges(model, dataset)
    golden = select_golden(model, dataset)
    _write_json(out / "ranges.json", {"ranges": ranges.to_dict()}, cfg)
    _write_json(
        out / "golden.json",
        {
            "golden": {
                "sample_ids": golden.sample_ids,
                "labels": {str(k): v for k, v in golden.labels.items()},
                "losses": {str(k): v for k, v in golden.losses.items()},
            }
        },
        cfg,
    )
    v_orig = compute_v_orig(model)
    _write_json(
        out / "v_orig.json",
        {"v_orig": {str(L.index): float(v_orig[L.index]) for L in model.layers}},
        cfg,
    )


def run_inject(cfg: WorkbenchConfig, out: Path, workers: int) -> None:
    _require(out, "golden.json", "profile")
    ranges = RangeProfile.from_dict(_payload(_require(out, "ranges.json", "profile"), "ranges"))
    model = cfg.build_model()
    golden = cfg.build_golden(model)
    campaign = run_campaign(
        model,
        golden,
        ranges,
        cfg.campaign["n_per_layer"],
        modes=cfg.campaign_modes(),
        locations=tuple(cfg.campaign.get("locations", ["output"])),
        seed=cfg.campaign["seed"],
        workers=workers,
    )
    _write_csv(out / "campaign.csv", campaign.to_csv(), cfg)
    _write_json(out / "campaign_summary.json", json.loads(campaign.summary_json()), cfg)


def run_analyze(cfg: WorkbenchConfig, out: Path, workers: int) -> None:
    csv_path = _require(out, "campaign.csv", "inject")
    campaign = CampaignResult.from_csv(
        _read_csv(csv_path),
        seed=cfg.campaign["seed"],
        n_per_layer=cfg.campaign["n_per_layer"],
    )
    model = cfg.build_model()
    vulns = layer_vulnerabilities(model, campaign)
    _write_json(
        out / "vulnerability.json",
        {
            "layers": [
                {
                    "layer": v.layer_index,
                    "v_orig": v.v_orig,
                    "p_prop": v.p_prop,
                    "delta_loss": v.delta_loss,
                    "v_layer": v.v_layer,
                }
                for v in vulns
            ]
        },
        cfg,
    )
    total_compute, _ = model_totals(model)
    head = model.layers[-1].index
    body = [v for v in vulns if v.layer_index != head]  # head reported separately
    vl = [v.v_layer for v in body]
    dup = [duplication_cost_model(model.layers[v.layer_index])[0] / total_compute for v in body]
    chk = [checksum_cost_model(model.layers[v.layer_index])[0] / total_compute for v in body]
    _write_csv(out / "curve_duplication.csv", build_coverage_curve(vl, dup).to_csv(), cfg)
    _write_csv(out / "curve_checksum.csv", build_coverage_curve(vl, chk).to_csv(), cfg)


def run_calibrate(cfg: WorkbenchConfig, out: Path, workers: int) -> None:
    _require(out, "golden.json", "profile")
    ranges = RangeProfile.from_dict(_payload(_require(out, "ranges.json", "profile"), "ranges"))
    model = cfg.build_model()
    golden = cfg.build_golden(model)
    if cfg.guard["precision"] == "auto":
        precisions = choose_checksum_precision(model, ranges)
    else:
        tag = Precision.from_tag(cfg.guard["precision"])
        precisions = {L.index: tag for L in model.layers}
    eps = calibrate_epsilon(
        model,
        golden,
        precisions=precisions,
        confidence=cfg.guard["confidence"],
        per_sample=cfg.guard["per_sample"],
    )
    _write_json(out / "epsilon.json", {"epsilon": epsilon_models_to_dict(eps)}, cfg)


def run_plan(cfg: WorkbenchConfig, out: Path, workers: int) -> None:
    rows = _payload(_require(out, "vulnerability.json", "analyze"), "layers")
    model = cfg.build_model()
    vl = [row["v_layer"] for row in rows]
    total_compute, total_memory = model_totals(model)
    plan = select_layers(
        vl,
        [checksum_cost_model(L)[0] for L in model.layers],
        cfg.guard["target_coverage"],
        head_index=model.layers[-1].index,
        scheme="checksum",
        total_compute=total_compute,
        memory_costs=[checksum_cost_model(L)[1] for L in model.layers],
        total_memory=total_memory,
    )
    _write_json(out / "plan.json", {"plan": plan.to_dict()}, cfg)


def run_evaluate(cfg: WorkbenchConfig, out: Path, workers: int) -> None:
    eps = epsilon_models_from_dict(_payload(_require(out, "epsilon.json", "calibrate"), "epsilon"))
    plan = ProtectionPlan.from_dict(_payload(_require(out, "plan.json", "plan"), "plan"))
    ranges = RangeProfile.from_dict(_payload(_require(out, "ranges.json", "profile"), "ranges"))
    model = cfg.build_model()
    golden = cfg.build_golden(model)
    chks = {i: offline_checksum(model.layers[i], eps[i].precision) for i in eps}
    report = evaluate_detection(
        model,
        golden,
        plan,
        chks,
        eps,
        ranges,
        n_per_layer=cfg.campaign["n_per_layer"],
        modes=cfg.campaign_modes(),
        seed=cfg.campaign["seed"],
    )
    _write_csv(out / "detection.csv", report.to_csv(), cfg)
    _write_csv(out / "thresholds.csv", report.thresholds_csv(), cfg)
    _write_json(out / "detection_summary.json", {"detection": report.summary()}, cfg)


def run_report(cfg: WorkbenchConfig, out: Path, workers: int) -> None:
    rows = _payload(_require(out, "vulnerability.json", "analyze"), "layers")
    campaign = _payload(_require(out, "campaign_summary.json", "inject"), "layers")
    plan = _payload(_require(out, "plan.json", "plan"), "plan")
    detection = _payload(_require(out, "detection_summary.json", "evaluate"), "detection")
    sdc_probability = sum(r["v_layer"] for r in rows)
    most_vulnerable = max(rows, key=lambda r: r["v_layer"])
    total_injections = sum(v["injections"] for v in campaign.values())
    _write_json(
        out / "report.json",
        {
            "overall_sdc_probability": sdc_probability,
            "most_vulnerable_layer": most_vulnerable["layer"],
            "zero_propagation_layers": [r["layer"] for r in rows if r["p_prop"] == 0.0],
            "head_p_prop": rows[-1]["p_prop"],
            "campaign_injections": total_injections,
            "campaign_margin_of_error": (
                margin_of_error(total_injections, 0.9, 0.99) if total_injections else None
            ),
            "protection": plan,
            "detection": detection,
        },
        cfg,
    )


_STAGE_FNS = {
    "profile": run_profile,
    "inject": run_inject,
    "analyze": run_analyze,
    "calibrate": run_calibrate,
    "plan": run_plan,
    "evaluate": run_evaluate,
    "report": run_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gemmguard",
        description="Fault-injection and checksum-protection workbench for GEMM pipelines",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, help="workbench config JSON")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--workers", type=int, default=None, help="campaign worker count")
        p.add_argument("--seed", type=int, default=None, help="override the campaign seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = WorkbenchConfig.from_file(args.config)
        if args.seed is not None:
            cfg.campaign["seed"] = args.seed
            cfg.raw["campaign"]["seed"] = args.seed
        workers = args.workers
        if workers is None:
            workers = int(os.environ.get("GEMMGUARD_WORKERS", "1"))
        out = _out_dir(cfg, args.out)
        _STAGE_FNS[args.stage](cfg, out, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return 3
    except (WorkbenchError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
