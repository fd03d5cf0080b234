"""Experiment configuration and the in-memory pipeline shared by the CLI and tests.

    cfg = ExperimentConfig(seed=1)
    data = build_dataset(cfg)
    run = run_protocol(cfg, data)
    run.reports["baseline"].robustness_gap, run.reports["ecrl"].robustness_gap
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .driftlab import DriftRecord, DriftReport, build_report, collect_records
from .ecrl import EcrlConfig, PairedData, finetune_ecrl, train_baseline
from .features import FeatureConfig, ModalityBundle, extract_bundle, stack_views
from .models import PRESETS, Model, preset_config
from .perturb import PerturbationSpec, perturb
from .signal_core import Bump, SynthClassParams, Waveform, load_csv, synth_ecg


def desk_class_params() -> list[SynthClassParams]:
    """Four classes with subtle morphology differences and class-typical rhythm.

    Heart rate differs by class, so a model can shortcut on rhythm; rate
    perturbations then act as label-preserving drift that such a model misreads.
    """
    def cls(bumps, hr):
        return SynthClassParams(tuple(Bump(*b) for b in bumps), heart_rate_bpm=hr, heart_rate_jitter=0.04,
                                amplitude_jitter=0.12, noise_level=0.02)
    return [
        cls([(0.15, 0.20, 0.025), (1.00, 0.40, 0.012), (0.30, 0.70, 0.040)], 62.0),
        cls([(0.15, 0.20, 0.025), (0.92, 0.40, 0.016), (0.30, 0.70, 0.040)], 70.0),
        cls([(0.15, 0.20, 0.025), (1.00, 0.40, 0.012), (0.16, 0.70, 0.040)], 78.0),
        cls([(0.07, 0.20, 0.025), (1.00, 0.40, 0.012), (0.40, 0.68, 0.034)], 86.0),
    ]


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # or "csv"
    csv_path: str | None = None
    n_per_class: int = 250
    length: int = 512
    rate_hz: float = 256.0
    classes: tuple[SynthClassParams, ...] | None = None  # None -> desk_class_params()

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise ValueError("csv source needs csv_path")
        if self.n_per_class < 1 or self.length < 16 or not self.rate_hz > 0:
            raise ValueError("n_per_class >= 1, length >= 16 and rate_hz > 0 are required")
        if self.classes is not None:
            object.__setattr__(self, "classes", tuple(self.classes))

    def class_params(self) -> list[SynthClassParams]:
        return list(self.classes) if self.classes is not None else desk_class_params()

    def to_dict(self) -> dict:
        return {"source": self.source, "csv_path": self.csv_path, "n_per_class": self.n_per_class,
                "length": self.length, "rate_hz": self.rate_hz,
                "classes": None if self.classes is None else [c.to_dict() for c in self.classes]}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        if d.get("classes") is not None:
            d["classes"] = tuple(SynthClassParams.from_dict(c) for c in d["classes"])
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train_fraction: float = 0.825
    features: FeatureConfig = field(default_factory=FeatureConfig)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    dt_weighted_energy: bool = False
    preset: str = "M7"
    ecrl: EcrlConfig = field(default_factory=lambda: EcrlConfig(batch_size=8, baseline_epochs=30))
    quantile: float = 0.95
    out_dir: str = "runs"

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1) so both splits are non-empty")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if not 0 < self.quantile <= 1:
            raise ValueError("quantile must lie in (0, 1]")

    @property
    def test_fraction(self) -> float:
        return 1.0 - self.train_fraction

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment under another global seed (perturbation and training seeds follow)."""
        return replace(self, seed=seed, perturbation=replace(self.perturbation, seed=seed),
                       ecrl=replace(self.ecrl, seed=seed))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": self.data.to_dict(),
            "train_fraction": self.train_fraction,
            "features": self.features.to_dict(),
            "perturbation": self.perturbation.to_dict(),
            "dt_weighted_energy": self.dt_weighted_energy,
            "preset": self.preset,
            "ecrl": self.ecrl.to_dict(),
            "quantile": self.quantile,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"seed", "data", "train_fraction", "features", "perturbation", "dt_weighted_energy",
                 "preset", "ecrl", "quantile", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        base = cls()
        kw = {k: d[k] for k in ("seed", "train_fraction", "dt_weighted_energy", "preset", "quantile", "out_dir")
              if k in d}
        if "data" in d:
            kw["data"] = DataConfig.from_dict(d["data"])
        if "features" in d:
            kw["features"] = FeatureConfig.from_dict(d["features"])
        if "perturbation" in d:
            kw["perturbation"] = PerturbationSpec.from_dict(d["perturbation"])
        if "ecrl" in d:
            kw["ecrl"] = EcrlConfig.from_dict({**base.ecrl.to_dict(), **d["ecrl"]})
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# stages


def make_waveforms(cfg: ExperimentConfig) -> list[Waveform]:
    """Class-major list of labeled windows."""
    d = cfg.data
    if d.source == "csv":
        waves = load_csv(d.csv_path)
        if not waves:
            raise ValueError(f"{d.csv_path}: no waveforms")
        if any(w.label is None for w in waves):
            raise ValueError(f"{d.csv_path}: every row needs a label")
        return waves
    params = d.class_params()
    return [synth_ecg(c, cfg.seed * 100_000 + i, params, d.length, d.rate_hz)
            for c in range(len(params)) for i in range(d.n_per_class)]


def split_indices(labels: np.ndarray, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified shuffle split; both parts sorted."""
    rng = np.random.default_rng([int(seed), 7])
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(train_fraction * idx.size))
        train.extend(idx[:k])
        test.extend(idx[k:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def sample_seed(cfg: ExperimentConfig, i: int) -> int:
    return cfg.seed * 1_000_000 + i


@dataclass
class Dataset:
    """Waveform-aligned clean/perturbed bundles with energy shifts and the split."""

    clean: list[ModalityBundle]
    pert: list[ModalityBundle]
    delta_e: np.ndarray
    labels: np.ndarray
    train: np.ndarray
    test: np.ndarray

    def paired(self, idx=None) -> PairedData:
        idx = np.arange(len(self.labels)) if idx is None else np.asarray(idx)
        return PairedData(stack_views([self.clean[i] for i in idx]), self.labels[idx],
                          stack_views([self.pert[i] for i in idx]), self.delta_e[idx])

    def input_shapes(self) -> dict:
        return {m: v.shape[1:] for m, v in stack_views(self.clean[:1]).items()}


def build_dataset(cfg: ExperimentConfig, waves: list[Waveform] | None = None,
                  spec: PerturbationSpec | None = None) -> Dataset:
    waves = make_waveforms(cfg) if waves is None else waves
    spec = cfg.perturbation if spec is None else spec
    pairs = [perturb(w, spec, sample_seed(cfg, i), cfg.dt_weighted_energy) for i, w in enumerate(waves)]
    clean = [extract_bundle(w, cfg.features) for w in waves]
    pert = [extract_bundle(p.perturbed, cfg.features) for p in pairs]
    labels = np.array([w.label for w in waves], dtype=np.int64)
    train, test = split_indices(labels, cfg.train_fraction, cfg.seed)
    return Dataset(clean, pert, np.array([p.delta_e for p in pairs]), labels, train, test)


def new_model(cfg: ExperimentConfig, data: Dataset) -> Model:
    n_classes = int(data.labels.max()) + 1
    return Model.create(preset_config(cfg.preset, data.input_shapes(), n_classes=n_classes), cfg.seed)


@dataclass
class ProtocolRun:
    models: dict[str, Model]
    history: dict[str, list[dict]]
    records: dict[str, list[DriftRecord]]  # held-out pairs
    calibration: dict[str, list[DriftRecord]]  # training pairs
    reports: dict[str, DriftReport]


def evaluate(model: Model, data: Dataset, cfg: ExperimentConfig) -> tuple[list[DriftRecord], list[DriftRecord], DriftReport]:
    """Held-out records, training-split calibration records and the report."""
    recs = collect_records(model, data.paired(data.test), cfg.ecrl.eps, ids=data.test)
    cal = collect_records(model, data.paired(data.train), cfg.ecrl.eps, ids=data.train)
    return recs, cal, build_report(recs, model, cfg.ecrl.eps, cfg.quantile, calibration=cal)


def run_protocol(cfg: ExperimentConfig, data: Dataset | None = None) -> ProtocolRun:
    """Baseline training, then fine-tuning on the full objective; both evaluated."""
    data = build_dataset(cfg) if data is None else data
    train = data.paired(data.train)
    base, h_base = train_baseline(new_model(cfg, data), train, cfg.ecrl)
    tuned, h_ecrl = finetune_ecrl(base, train, cfg.ecrl)
    run = ProtocolRun({"baseline": base, "ecrl": tuned}, {"baseline": h_base, "ecrl": h_ecrl}, {}, {}, {})
    for k, m in run.models.items():
        run.records[k], run.calibration[k], run.reports[k] = evaluate(m, data, cfg)
    return run
