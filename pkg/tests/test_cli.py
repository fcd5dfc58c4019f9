import json
from pathlib import Path

import pytest

from gemmguard.cli import STAGES, main


def write_config(tmp_path, **overrides):
    cfg = {
        "model": {"blocks": 1, "dim": 8, "tokens": 4, "classes": 5, "seed": 17,
                  "dtype": "binary16-emulated"},
        "dataset": {"size": 40, "seed": 3},
        "campaign": {"n_per_layer": 8, "seed": 7},
        "guard": {"confidence": 0.999, "precision": "binary64",
                  "target_coverage": 0.9, "per_sample": True},
        "correction": {"kind": "replay", "max_replays": 3},
        "output_dir": str(tmp_path / "out"),
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path, cfg


def run_all(config_path):
    for stage in STAGES:
        code = main([stage, "--config", str(config_path)])
        assert code == 0, f"stage {stage} failed"


def test_full_pipeline_produces_artifacts(tmp_path):
    config_path, cfg = write_config(tmp_path)
    run_all(config_path)
    out = Path(cfg["output_dir"])
    for name in (
        "ranges.json", "golden.json", "v_orig.json", "campaign.csv",
        "campaign_summary.json", "vulnerability.json", "curve_duplication.csv",
        "curve_checksum.csv", "epsilon.json", "plan.json", "detection.csv",
        "thresholds.csv", "detection_summary.json", "report.json",
    ):
        assert (out / name).exists(), name


def test_curve_columns_monotone(tmp_path):
    config_path, cfg = write_config(tmp_path)
    for stage in ("profile", "inject", "analyze"):
        assert main([stage, "--config", str(config_path)]) == 0
    out = Path(cfg["output_dir"])
    for curve in ("curve_duplication.csv", "curve_checksum.csv"):
        rows = [
            line.split(",")
            for line in (out / curve).read_text().splitlines()
            if line and not line.startswith("#") and not line.startswith("overhead")
        ]
        xs = [float(r[0]) for r in rows]
        ys = [float(r[1]) for r in rows]
        assert xs == sorted(xs) and ys == sorted(ys)


def test_evaluate_before_calibrate_is_stage_error(tmp_path, capsys):
    config_path, _ = write_config(tmp_path)
    assert main(["profile", "--config", str(config_path)]) == 0
    code = main(["evaluate", "--config", str(config_path)])
    assert code == 3
    assert "calibrate" in capsys.readouterr().err


def test_inject_before_profile_is_stage_error(tmp_path):
    config_path, _ = write_config(tmp_path)
    assert main(["inject", "--config", str(config_path)]) == 3


def test_missing_config_is_config_error(tmp_path):
    assert main(["profile", "--config", str(tmp_path / "nope.json")]) == 2


def test_invalid_config_is_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {}}')
    assert main(["profile", "--config", str(bad)]) == 2


def test_artifacts_embed_config_hash(tmp_path):
    config_path, cfg = write_config(tmp_path)
    assert main(["profile", "--config", str(config_path)]) == 0
    out = Path(cfg["output_dir"])
    doc = json.loads((out / "ranges.json").read_text())
    assert "config_hash" in doc and "seeds" in doc
    assert doc["seeds"]["campaign"] == 7


def test_pipeline_deterministic(tmp_path):
    config_path, cfg = write_config(tmp_path)
    run_all(config_path)
    out1 = {p.name: p.read_bytes() for p in Path(cfg["output_dir"]).iterdir()}
    out2_dir = tmp_path / "out2"
    for stage in STAGES:
        assert main([stage, "--config", str(config_path), "--out", str(out2_dir)]) == 0
    out2 = {p.name: p.read_bytes() for p in out2_dir.iterdir()}
    assert out1.keys() == out2.keys()
    for name in out1:
        assert out1[name] == out2[name], f"{name} differs between runs"


def test_seed_flag_overrides_campaign_seed(tmp_path):
    config_path, cfg = write_config(tmp_path)
    assert main(["profile", "--config", str(config_path)]) == 0
    assert main(["inject", "--config", str(config_path)]) == 0
    base = (Path(cfg["output_dir"]) / "campaign.csv").read_text()
    alt_dir = tmp_path / "alt"
    for stage in ("profile", "inject"):
        assert main([stage, "--config", str(config_path), "--out", str(alt_dir),
                     "--seed", "99"]) == 0
    alt = (alt_dir / "campaign.csv").read_text()
    assert base != alt


def test_env_overrides_output_dir(tmp_path, monkeypatch):
    config_path, _ = write_config(tmp_path)
    env_dir = tmp_path / "env_out"
    monkeypatch.setenv("GEMMGUARD_OUT", str(env_dir))
    assert main(["profile", "--config", str(config_path)]) == 0
    assert (env_dir / "ranges.json").exists()


def test_model_from_weights_file(tmp_path):
    from gemmguard.model import build_toy_model
    from gemmguard.weights_io import save_weights

    model = build_toy_model(blocks=1, dim=8, tokens=4, classes=5, seed=17,
                            dtype="binary16-emulated")
    wpath = tmp_path / "weights.bin"
    save_weights(wpath, model)
    config_path, cfg = write_config(tmp_path, model={"path": str(wpath)})
    assert main(["profile", "--config", str(config_path)]) == 0
    doc = json.loads((Path(cfg["output_dir"]) / "v_orig.json").read_text())
    assert len(doc["v_orig"]) == len(model.layers)
