import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from pectlab import cli
from pectlab import driftlab as dl
from pectlab.experiment import ExperimentConfig


def small_config(tmp_path, identity=False, **over):
    d = {
        "seed": 3,
        "data": {"n_per_class": 6, "length": 256, "rate_hz": 128.0},
        "features": {"temporal_len": 64, "scalogram_size": 8, "spectrum_bins": 16},
        "ecrl": {"batch_size": 8, "baseline_epochs": 2, "finetune_epochs": 1},
        "out_dir": str(tmp_path / "run"),
    }
    if identity:
        d["perturbation"] = {"amplitude": False, "stretch": False, "spectral": False, "noise": False}
    d.update(over)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(d))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def pipeline(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "run"
    assert run("synth", "--config", cfg) == 0
    assert run("features", "--out", out) == 0
    return cfg, out


def test_synth_manifest(tmp_path):
    cfg = small_config(tmp_path)
    assert run("synth", "--config", cfg) == 0
    m = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert m["per_class"] == {str(c): 6 for c in range(4)}
    assert m["n_waveforms"] == 24 == m["n_train"] + m["n_test"]
    assert sorted(m["train"] + m["test"]) == list(range(24))
    first = m["manifest_sha256"]
    assert run("synth", "--config", cfg) == 0
    assert json.loads((tmp_path / "run" / "manifest.json").read_text())["manifest_sha256"] == first
    assert run("synth", "--config", cfg, "--seed", 4) == 0
    assert json.loads((tmp_path / "run" / "manifest.json").read_text())["manifest_sha256"] != first


def test_features_counts_and_rerun(pipeline):
    cfg, out = pipeline
    meta = json.loads((out / "features.json").read_text())
    assert meta["n_bundles"] == 2 * meta["n_waveforms"] == 48
    clean, pert = cli.read_bundles(out / "clean.pecb"), cli.read_bundles(out / "pert.pecb")
    assert len(clean) + len(pert) == 48
    assert clean[0].temporal.shape == (64,) and clean[0].scalogram.shape == (8, 8) and clean[0].spectrum.shape == (16,)
    before = (out / "clean.pecb").read_bytes(), (out / "pert.pecb").read_bytes()
    assert run("features", "--out", out) == 0
    assert before == ((out / "clean.pecb").read_bytes(), (out / "pert.pecb").read_bytes())


def test_full_pipeline(pipeline):
    cfg, out = pipeline
    assert run("train", "--out", out, "--mode", "ecrl") == 2  # needs a baseline checkpoint first
    assert run("train", "--out", out, "--mode", "baseline") == 0
    first = (out / "baseline.ckpt").read_bytes()
    assert run("train", "--out", out, "--mode", "baseline") == 0
    assert (out / "baseline.ckpt").read_bytes() == first
    hist = [json.loads(l) for l in (out / "history_baseline.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in hist] == [0, 1]
    assert run("train", "--out", out, "--mode", "ecrl") == 0
    assert len((out / "history_ecrl.jsonl").read_text().splitlines()) == 1

    assert run("evaluate", "--out", out, "--mode", "baseline") == 0
    assert not (out / "improvement.csv").exists()
    assert run("evaluate", "--out", out, "--mode", "ecrl") == 0
    before, after = dl.read_report(out / "report_baseline.json"), dl.read_report(out / "report_ecrl.json")
    rows = list(csv.DictReader((out / "improvement.csv").open()))
    tab = dl.improvement_table(before, after)
    for k in ("clean_delta_pct", "pert_delta_pct", "robustness_reduction_pct"):
        if tab[k] is None:
            assert rows[0][k] == ""
        else:
            assert float(rows[0][k]) == pytest.approx(tab[k], abs=5e-5)
    recs = dl.read_records(out / "records_ecrl.jsonl")
    assert len(recs) == before.n

    assert run("plot", "--out", out, "--mode", "ecrl") == 0
    svg = ET.parse(out / "scatter_ecrl.svg").getroot()
    text = (out / "scatter_ecrl.svg").read_text()
    slope = dl.energy_drift_regression(recs)[0]
    assert f"slope = {slope:.6g}" in text
    pts = [g for g in svg.iter() if g.get("id", "").startswith("points")]
    assert pts and len([u for u in pts[0].iter() if u.tag.endswith("use")]) == len(recs)
    assert (out / "curve_ecrl.svg").exists()

    assert run("decide", "--out", out, "--mode", "ecrl") == 0
    verdicts = list(csv.DictReader((out / "verdicts_ecrl.csv").open()))
    assert len(verdicts) == len(recs)
    assert {v["verdict"] for v in verdicts} <= set(dl.VERDICTS)


def test_identity_perturbations_end_to_end(tmp_path):
    cfg = small_config(tmp_path, identity=True)
    out = tmp_path / "run"
    for argv in (("synth", "--config", cfg), ("features", "--out", out), ("train", "--out", out),
                 ("evaluate", "--out", out)):
        assert run(*argv) == 0
    rep = dl.read_report(out / "report_baseline.json")
    assert rep.robustness_gap == 0 and rep.mean_fused_drift == 0
    assert run("decide", "--out", out, "--kappa-hat", 1.0) == 0
    verdicts = list(csv.DictReader((out / "verdicts_baseline.csv").open()))
    assert all(v["verdict"] == dl.KEEP_SUB_MARGIN for v in verdicts)
    # all calibration ratios are zero, so a calibrated threshold is unusable
    assert run("decide", "--out", out) == 2


def test_decide_threshold_monotone(pipeline):
    cfg, out = pipeline
    for argv in (("train", "--out", out), ("evaluate", "--out", out)):
        assert run(*argv) == 0
    changes = []
    for kh in (0.01, 0.1, 1.0, 10.0, 1e3):
        assert run("decide", "--out", out, "--kappa-hat", kh) == 0
        rows = list(csv.DictReader((out / "verdicts_baseline.csv").open()))
        changes.append({r["sample_id"] for r in rows if r["verdict"] == dl.CHANGE})
    assert all(a <= b for a, b in zip(changes, changes[1:]))


def test_plot_with_zero_records(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "records_baseline.jsonl").write_text("")
    assert run("plot", "--out", out) == 0
    assert ET.parse(out / "scatter_baseline.svg").getroot().tag.endswith("svg")


def test_feature_digest_mismatch_fails_loudly(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("train", "--out", out) == 0
    other = small_config(tmp_path, features={"temporal_len": 32, "scalogram_size": 8, "spectrum_bins": 16})
    assert run("evaluate", "--out", out, "--config", other) == 2
    meta = json.loads((out / "features.json").read_text())
    meta["feature_digest"] = "0" * 16
    (out / "features.json").write_text(json.dumps(meta))
    assert run("evaluate", "--out", out) == 2


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--mode", "other"])
    assert exc.value.code == 1
    assert run("synth", "--config", tmp_path / "missing.json") == 2
    (tmp_path / "bad.json").write_text(json.dumps({"colour": "blue"}))
    assert run("synth", "--config", tmp_path / "bad.json") == 1
    assert run("features", "--out", tmp_path / "empty") == 2
    assert run("decide", "--out", tmp_path, "--quantile", 1.5) == 1
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("synth", "--config", small_config(tmp_path), "--out", blocker / "sub") == 2


def test_numeric_failure_exit_code(pipeline, monkeypatch):
    cfg, out = pipeline

    def boom(*a, **k):
        raise cli.NonFiniteError("non-finite loss in epoch 0")

    monkeypatch.setattr(cli, "train_baseline", boom)
    assert run("train", "--out", out) == 3


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.load(small_config(tmp_path))
    cfg.save(tmp_path / "again.json")
    assert ExperimentConfig.load(tmp_path / "again.json") == cfg
