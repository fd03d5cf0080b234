"""Energy-consistent representation learning and drift diagnostics for ECG-like signals."""

from .signal_core import Waveform, energy, energy_shift, synth_ecg
from .perturb import PerturbationSpec, PerturbedPair, perturb
from .features import FeatureConfig, ModalityBundle, extract_bundle
from .models import Model, preset_config
from .ecrl import EcrlConfig, ecrl_batch_loss, finetune_ecrl, train_baseline
from .driftlab import DriftRecord, DriftReport, build_report, collect_records, decision_rule
from .experiment import DataConfig, ExperimentConfig, build_dataset, run_protocol

__all__ = [
    "Waveform", "energy", "energy_shift", "synth_ecg",
    "PerturbationSpec", "PerturbedPair", "perturb",
    "FeatureConfig", "ModalityBundle", "extract_bundle",
    "Model", "preset_config",
    "EcrlConfig", "ecrl_batch_loss", "finetune_ecrl", "train_baseline",
    "DriftRecord", "DriftReport", "build_report", "collect_records", "decision_rule",
    "DataConfig", "ExperimentConfig", "build_dataset", "run_protocol",
]
__version__ = "0.1.0"
