"""Command-line driver: a flat-file pipeline over one output directory.

    pectlab synth    --config exp.json --out run/
    pectlab features --out run/
    pectlab train    --out run/ --mode baseline
    pectlab train    --out run/ --mode ecrl
    pectlab evaluate --out run/ --mode baseline   (then --mode ecrl)
    pectlab plot     --out run/ --mode ecrl
    pectlab decide   --out run/ --mode ecrl --quantile 0.9

Layout of the output directory::

    config.json            resolved experiment configuration
    waveforms.csv          labeled windows (synth)
    manifest.json          counts, split and content hash (synth)
    clean.pecb pert.pecb   feature bundles, waveform-aligned (features)
    features.json          feature digest, labels, energy shifts (features)
    <mode>.ckpt            model checkpoint (train)
    history_<mode>.jsonl   one record per epoch (train)
    report_<mode>.json     drift report (evaluate)
    records_<mode>.jsonl   held-out records (evaluate)
    calibration_<mode>.jsonl   training-split records (evaluate)
    improvement.csv        percentage table once both modes are evaluated
    scatter_<mode>.svg curve_<mode>.svg   (plot)
    verdicts_<mode>.csv    per-record verdicts (decide)

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import driftlab as dl
from .autodiff import NonFiniteError
from .ecrl import finetune_ecrl, train_baseline, write_history
from .experiment import Dataset, ExperimentConfig, make_waveforms, new_model, sample_seed, split_indices
from .features import extract_bundle, read_bundles, write_bundles
from .models import PRESETS, Model
from .perturb import perturb
from .signal_core import load_csv, save_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MODES = ("baseline", "ecrl")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"{path} not found (run the earlier pipeline stage first)")
    return json.loads(path.read_text())


def resolve_config(args) -> tuple[ExperimentConfig, Path]:
    """Config precedence: flags, then ``--config``, then the run's saved config, then defaults."""
    out = Path(args.out) if args.out else None
    if args.config:
        try:
            cfg = ExperimentConfig.load(args.config)
        except FileNotFoundError:
            raise DataError(f"config file {args.config} not found")
        except (ValueError, TypeError, KeyError) as exc:
            raise UsageError(f"bad config {args.config}: {exc}")
    elif out is not None and (out / "config.json").exists():
        cfg = ExperimentConfig.load(out / "config.json")
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.preset is not None:
        cfg = replace(cfg, preset=args.preset)
    if args.quantile is not None:
        if not 0 < args.quantile <= 1:
            raise UsageError("--quantile must lie in (0, 1]")
        cfg = replace(cfg, quantile=args.quantile)
    if out is None:
        out = Path(cfg.out_dir)
    cfg = replace(cfg, out_dir=str(out))
    return cfg, out


def _ensure_out(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc}")


def load_dataset(out: Path) -> tuple[Dataset, dict]:
    meta = _load_json(out / "features.json")
    for name in ("clean.pecb", "pert.pecb"):
        if not (out / name).exists():
            raise DataError(f"{out / name} not found (run `features` first)")
    try:
        clean, pert = read_bundles(out / "clean.pecb"), read_bundles(out / "pert.pecb")
    except ValueError as exc:
        raise DataError(str(exc))
    if len(clean) != len(pert) or len(clean) != len(meta["labels"]):
        raise DataError("feature files are not aligned with features.json")
    data = Dataset(clean, pert, np.array(meta["delta_e"], dtype=np.float64), np.array(meta["labels"], dtype=np.int64),
                   np.array(meta["train"], dtype=int), np.array(meta["test"], dtype=int))
    return data, meta


def _check_digest(expected: str, found: str | None, what: str) -> None:
    if found != expected:
        raise DataError(f"feature configuration mismatch: {what} was built with digest {found}, "
                        f"current features have {expected}")


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: ExperimentConfig, out: Path) -> dict:
    _ensure_out(out)
    try:
        waves = make_waveforms(cfg)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc))
    labels = np.array([w.label for w in waves], dtype=np.int64)
    train, test = split_indices(labels, cfg.train_fraction, cfg.seed)
    save_csv(waves, out / "waveforms.csv")
    cfg.save(out / "config.json")
    manifest = {
        "n_waveforms": len(waves),
        "per_class": {str(c): int(n) for c, n in zip(*np.unique(labels, return_counts=True))},
        "n_train": int(train.size),
        "n_test": int(test.size),
        "train": train.tolist(),
        "test": test.tolist(),
        "seed": cfg.seed,
        "waveforms_sha256": _sha256(out / "waveforms.csv"),
    }
    manifest["manifest_sha256"] = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()
    _dump_json(manifest, out / "manifest.json")
    print(f"synth: {len(waves)} waveforms ({manifest['n_train']} train / {manifest['n_test']} test) -> {out}")
    return manifest


def cmd_features(cfg: ExperimentConfig, out: Path) -> dict:
    manifest = _load_json(out / "manifest.json")
    src = out / "waveforms.csv"
    if not src.exists():
        raise DataError(f"{src} not found (run `synth` first)")
    try:
        waves = load_csv(src)
    except ValueError as exc:
        raise DataError(str(exc))
    if len(waves) != manifest["n_waveforms"]:
        raise DataError("waveforms.csv does not match manifest.json")
    for w in waves:
        try:
            cfg.features.validate_for_rate(w.sample_rate_hz)
        except ValueError as exc:
            raise DataError(str(exc))
    pairs = [perturb(w, cfg.perturbation, sample_seed(cfg, i), cfg.dt_weighted_energy) for i, w in enumerate(waves)]
    write_bundles([extract_bundle(w, cfg.features) for w in waves], out / "clean.pecb")
    write_bundles([extract_bundle(p.perturbed, cfg.features) for p in pairs], out / "pert.pecb")
    meta = {
        "feature_digest": cfg.features.digest(),
        "n_waveforms": len(waves),
        "n_bundles": 2 * len(waves),
        "labels": [int(w.label) for w in waves],
        "delta_e": [float(p.delta_e) for p in pairs],
        "train": manifest["train"],
        "test": manifest["test"],
    }
    _dump_json(meta, out / "features.json")
    cfg.save(out / "config.json")
    print(f"features: {meta['n_bundles']} bundles (digest {meta['feature_digest']}) -> {out}")
    return meta


def cmd_train(cfg: ExperimentConfig, out: Path, mode: str) -> Model:
    data, meta = load_dataset(out)
    digest = meta["feature_digest"]
    _check_digest(cfg.features.digest(), digest, "the feature files")
    train = data.paired(data.train)
    ckpt_meta = {"feature_digest": digest, "mode": mode, "seed": cfg.seed, "preset": cfg.preset}
    if mode == "baseline":
        model, hist = train_baseline(new_model(cfg, data), train, cfg.ecrl)
    else:
        base_path = out / "baseline.ckpt"
        if not base_path.exists():
            raise DataError(f"ecrl mode needs a baseline checkpoint at {base_path}")
        base, base_meta = Model.load(base_path)
        _check_digest(digest, base_meta.get("feature_digest"), "the baseline checkpoint")
        model, hist = finetune_ecrl(base, train, cfg.ecrl)
    model.save(out / f"{mode}.ckpt", ckpt_meta)
    write_history(hist, out / f"history_{mode}.jsonl")
    print(f"train[{mode}]: {len(hist)} epochs, final loss {hist[-1]['loss']:.6g}" if hist else
          f"train[{mode}]: 0 epochs")
    return model


def write_improvement_csv(before: dl.DriftReport, after: dl.DriftReport, path: Path) -> dict:
    tab = dl.improvement_table(before, after)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["preset", "clean_delta_pct", "pert_delta_pct", "robustness_reduction_pct"])
        w.writerow([tab.get("preset", "")] + ["" if tab[k] is None else f"{tab[k]:.4f}"
                                             for k in ("clean_delta_pct", "pert_delta_pct",
                                                       "robustness_reduction_pct")])
    return tab


def cmd_evaluate(cfg: ExperimentConfig, out: Path, mode: str) -> dl.DriftReport:
    data, meta = load_dataset(out)
    _check_digest(cfg.features.digest(), meta["feature_digest"], "the feature files")
    path = out / f"{mode}.ckpt"
    if not path.exists():
        raise DataError(f"checkpoint {path} not found (run `train --mode {mode}` first)")
    model, ckpt_meta = Model.load(path)
    _check_digest(meta["feature_digest"], ckpt_meta.get("feature_digest"), f"checkpoint {path.name}")
    recs = dl.collect_records(model, data.paired(data.test), cfg.ecrl.eps, ids=data.test)
    cal = dl.collect_records(model, data.paired(data.train), cfg.ecrl.eps, ids=data.train)
    report = dl.build_report(recs, model, cfg.ecrl.eps, cfg.quantile, calibration=cal)
    dl.write_records(recs, out / f"records_{mode}.jsonl")
    dl.write_records(cal, out / f"calibration_{mode}.jsonl")
    dl.write_report(report, out / f"report_{mode}.json")
    print(f"evaluate[{mode}]: clean {report.acc_clean:.4f} pert {report.acc_pert:.4f} "
          f"gap {report.robustness_gap:.4f} drift {report.mean_fused_drift:.4g}")
    other = out / "report_baseline.json", out / "report_ecrl.json"
    if all(p.exists() for p in other):
        before, after = dl.read_report(other[0]), dl.read_report(other[1])
        tab = write_improvement_csv(before, after, out / "improvement.csv")
        print("improvement: " + ", ".join(f"{k} {v if v is None else round(v, 2)}" for k, v in tab.items()))
    return report


def _records(out: Path, mode: str) -> list[dl.DriftRecord]:
    path = out / f"records_{mode}.jsonl"
    if not path.exists():
        raise DataError(f"{path} not found (run `evaluate --mode {mode}` first)")
    return dl.read_records(path)


def plot_scatter(records, path: Path, title: str = "") -> tuple[float | None, float | None]:
    """Drift against |dE| with the least-squares line; returns ``(slope, intercept)``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.array([r.abs_delta_e for r in records], dtype=float)
    y = np.array([r.drift_fused for r in records], dtype=float)
    slope, intercept = dl.energy_drift_regression(records) if len(records) >= 2 else (None, None)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(x, y, s=8, alpha=0.6, gid="points")
    if slope is not None:
        xs = np.linspace(0.0, x.max(), 50)
        ax.plot(xs, intercept + slope * xs, color="C3", label=f"slope = {slope:.6g}")
        ax.legend(loc="upper left")
    ax.set_xlabel("|ΔE|")
    ax.set_ylabel("fused drift")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return slope, intercept


def plot_curve(records, path: Path, m: str = dl.FUSED, n_bins: int = 10) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    if records and any(r.delta_e != 0 for r in records):
        c = dl.energy_response_curve(records, m, n_bins)
        mids = 0.5 * (np.asarray(c.edges[:-1]) + np.asarray(c.edges[1:]))
        ys = np.array([np.nan if v is None else v for v in c.means], dtype=float)
        ax.plot(mids, ys, marker="o")
    ax.set_xlabel("|ΔE| bin")
    ax.set_ylabel(f"mean drift ({m})")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_plot(cfg: ExperimentConfig, out: Path, mode: str) -> dict:
    recs = _records(out, mode)
    slope, intercept = plot_scatter(recs, out / f"scatter_{mode}.svg", title=f"{cfg.preset} {mode}")
    plot_curve(recs, out / f"curve_{mode}.svg")
    dl.write_scatter_csv(recs, out / f"scatter_{mode}.csv")
    print(f"plot[{mode}]: {len(recs)} points, slope {slope}")
    return {"n_points": len(recs), "slope": slope, "intercept": intercept}


def cmd_decide(cfg: ExperimentConfig, out: Path, mode: str, kappa_hat: float | None = None) -> dict[str, int]:
    recs = _records(out, mode)
    if kappa_hat is None:
        cal_path = out / f"calibration_{mode}.jsonl"
        cal = dl.read_records(cal_path) if cal_path.exists() else recs
        if not cal:
            raise DataError("no records to calibrate the ratio threshold on")
        kappa_hat = dl.calibrate_kappa_hat(cal, cfg.quantile)
    if not kappa_hat > 0:
        raise DataError(f"calibrated threshold {kappa_hat} is not positive (all calibration ratios are zero)")
    counts = {k: 0 for k in (dl.KEEP_SUB_MARGIN, dl.KEEP_VIRTUAL_DRIFT, dl.CHANGE)}
    with open(out / f"verdicts_{mode}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "verdict", "reason", "drift_fused", "margin", "gamma"])
        for r in recs:
            v = dl.decision_rule(r, kappa_hat)
            counts[v.kind] += 1
            w.writerow([r.sample_id, v.kind, v.reason, repr(r.drift_fused), repr(r.margin), repr(r.gamma)])
    print(f"decide[{mode}]: kappa_hat {kappa_hat:.6g} (q={cfg.quantile}) " +
          " ".join(f"{k}={v}" for k, v in counts.items()))
    return counts


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--seed", type=int, help="global seed override")
    common.add_argument("--preset", choices=sorted(PRESETS), help="model preset override")
    common.add_argument("--out", help="run directory (defaults to out_dir from the config)")
    common.add_argument("--quantile", type=float, help="calibration quantile for the ratio threshold")
    p = _Parser(prog="pectlab", description="Energy-consistent drift experiments on synthetic ECG.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate labeled waveforms and the manifest")
    sub.add_parser("features", parents=[common], help="extract clean and perturbed feature bundles")
    for name, text in (("train", "train a checkpoint"), ("evaluate", "evaluate a checkpoint"),
                       ("plot", "drift scatter and energy-response curve"), ("decide", "verdict table")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--mode", choices=MODES, default="baseline")
        if name == "decide":
            sp.add_argument("--kappa-hat", type=float, help="fixed ratio threshold instead of calibrating")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out = resolve_config(args)
        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "features":
            cmd_features(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out, args.mode)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out, args.mode)
        elif args.command == "plot":
            cmd_plot(cfg, out, args.mode)
        else:
            cmd_decide(cfg, out, args.mode, args.kappa_hat)
    except UsageError as exc:
        print(f"pectlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"pectlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"pectlab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
