"""Waveforms, physiologic energy, synthetic ECG generation and CSV I/O."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class NonFiniteSampleError(ValueError):
    """Raised when a waveform carries a NaN or infinite sample."""

    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite sample {value!r} at index {index}")
        self.index = index


class CsvFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DegenerateInputWarning(RuntimeWarning):
    """Zero-variance input to z-normalization; output is all zeros."""


def _check_finite(x: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise NonFiniteSampleError(int(bad[0]), float(x[bad[0]]))


@dataclass(frozen=True, eq=False)
class Waveform:
    """A sampled 1-D signal.

    ``samples`` is copied to a read-only float64 array on construction.
    """

    samples: np.ndarray
    sample_rate_hz: float
    label: int | None = None

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).ravel()
        if x.size < 2:
            raise ValueError(f"waveform needs at least 2 samples, got {x.size}")
        _check_finite(x)
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate_hz

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def replace(self, samples) -> "Waveform":
        """Same rate and label, new samples."""
        return Waveform(samples, self.sample_rate_hz, self.label)


def energy(w: Waveform | np.ndarray, dt_weighted: bool = True, sample_rate_hz: float | None = None) -> float:
    """Physiologic energy ``dt * sum(x**2)``.

    With ``dt_weighted=False`` the plain sum of squares is returned. Raw
    arrays are accepted when ``sample_rate_hz`` is given (or weighting is off).
    """
    if isinstance(w, Waveform):
        x, rate = w.samples, w.sample_rate_hz
    else:
        x = np.asarray(w, dtype=np.float64).ravel()
        _check_finite(x)
        rate = sample_rate_hz
        if dt_weighted and rate is None:
            raise ValueError("sample_rate_hz is required for dt-weighted energy of a raw array")
    total = float(np.dot(x, x))
    return total / rate if dt_weighted else total


def energy_shift(clean: Waveform, pert: Waveform, dt_weighted: bool = True) -> float:
    """Signed shift ``E(pert) - E(clean)``."""
    return energy(pert, dt_weighted) - energy(clean, dt_weighted)


# --------------------------------------------------------------------------
# synthetic ECG


@dataclass(frozen=True)
class Bump:
    amplitude: float
    center: float  # fraction of the cardiac cycle
    width: float  # Gaussian sigma, fraction of the cardiac cycle

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"bump width must be > 0, got {self.width}")
        if not 0 < self.center < 1:
            raise ValueError(f"bump center must lie in (0, 1), got {self.center}")
        if not math.isfinite(self.amplitude):
            raise ValueError("bump amplitude must be finite")


@dataclass(frozen=True)
class SynthClassParams:
    """Morphology of one diagnostic class: P, QRS and T bumps per beat."""

    bumps: tuple[Bump, ...]
    heart_rate_bpm: float = 72.0
    heart_rate_jitter: float = 0.06  # fractional std of the per-window rate
    amplitude_jitter: float = 0.05  # fractional std of per-window bump amplitudes
    noise_level: float = 0.01  # std of additive Gaussian baseline noise
    random_phase: bool = True
    gain: float = 1.0  # overall gain applied to every bump
    gain_jitter: float = 0.0  # fractional std of the per-window overall gain

    def __post_init__(self):
        object.__setattr__(self, "bumps", tuple(self.bumps))
        if not self.bumps:
            raise ValueError("at least one bump is required")
        if not self.heart_rate_bpm > 0:
            raise ValueError("heart_rate_bpm must be > 0")

    def to_dict(self) -> dict:
        return {
            "bumps": [[b.amplitude, b.center, b.width] for b in self.bumps],
            "heart_rate_bpm": self.heart_rate_bpm,
            "heart_rate_jitter": self.heart_rate_jitter,
            "amplitude_jitter": self.amplitude_jitter,
            "noise_level": self.noise_level,
            "random_phase": self.random_phase,
            "gain": self.gain,
            "gain_jitter": self.gain_jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthClassParams":
        d = dict(d)
        d["bumps"] = tuple(Bump(*b) for b in d["bumps"])
        return cls(**d)


def default_class_params() -> list[SynthClassParams]:
    """Four classes: normal, wide QRS, inverted T, absent P with peaked T."""
    return [
        SynthClassParams((Bump(0.15, 0.20, 0.025), Bump(1.00, 0.40, 0.012), Bump(0.30, 0.70, 0.040))),
        SynthClassParams((Bump(0.15, 0.20, 0.025), Bump(0.85, 0.40, 0.028), Bump(0.30, 0.70, 0.040))),
        SynthClassParams((Bump(0.15, 0.20, 0.025), Bump(1.00, 0.40, 0.012), Bump(-0.30, 0.70, 0.040))),
        SynthClassParams((Bump(0.00, 0.20, 0.025), Bump(1.00, 0.40, 0.012), Bump(0.55, 0.66, 0.030))),
    ]


def synth_ecg(
    class_id: int,
    seed: int,
    params: Sequence[SynthClassParams] | None = None,
    length: int = 1000,
    rate: float = 500.0,
) -> Waveform:
    """Sum of Gaussian P/QRS/T bumps repeated per beat, plus baseline noise.

    Output is a deterministic function of ``(class_id, seed, params, length, rate)``.
    """
    if params is None:
        params = default_class_params()
    if not 0 <= class_id < len(params):
        raise ValueError(f"class_id {class_id} outside 0..{len(params) - 1}")
    if length <= 0:
        raise ValueError("length must be positive")
    p = params[class_id]
    rng = np.random.default_rng([int(seed), int(class_id)])

    hr = p.heart_rate_bpm * (1.0 + p.heart_rate_jitter * rng.standard_normal())
    rr = 60.0 / max(hr, 1e-6)
    phase = rng.uniform() if p.random_phase else 0.0
    amp_scale = 1.0 + p.amplitude_jitter * rng.standard_normal(len(p.bumps))
    amp_scale = amp_scale * p.gain * (1.0 + p.gain_jitter * rng.standard_normal())

    t = np.arange(length) / rate
    cycle_pos = t / rr + phase
    x = np.zeros(length)
    first, last = int(math.floor(cycle_pos[0])) - 1, int(math.floor(cycle_pos[-1])) + 1
    for k in range(first, last + 1):
        for b, s in zip(p.bumps, amp_scale):
            tc = (k + b.center - phase) * rr
            x += b.amplitude * s * np.exp(-0.5 * ((t - tc) / (b.width * rr)) ** 2)
    if p.noise_level > 0:
        x += p.noise_level * rng.standard_normal(length)
    return Waveform(x, rate, class_id)


def z_normalize(w: Waveform) -> Waveform:
    """Zero mean, unit population std.

    Zero-variance input yields all zeros and a ``DegenerateInputWarning``.
    """
    y, degenerate = z_normalize_array(w.samples)
    if degenerate:
        warnings.warn("zero-variance waveform; returning zeros", DegenerateInputWarning, stacklevel=2)
    return w.replace(y)


def z_normalize_array(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean()
    std = math.sqrt(float(np.mean(centered * centered)))
    if std == 0.0 or std < 1e-300:
        return np.zeros_like(x), True
    return centered / std, False


# --------------------------------------------------------------------------
# CSV


def save_csv(waveforms: Iterable[Waveform], path: str | Path) -> None:
    """Write ``label,rate_hz,s0,s1,...`` rows, fixed-point with 12 decimals."""
    waveforms = list(waveforms)
    width = max((len(w) for w in waveforms), default=0)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["label", "rate_hz"] + [f"s{i}" for i in range(width)])
        for w in waveforms:
            label = "" if w.label is None else str(w.label)
            out.writerow([label, repr(w.sample_rate_hz)] + [f"{v:.12f}" for v in w.samples])


def load_csv(path: str | Path) -> list[Waveform]:
    """Read waveforms written by :func:`save_csv` (label column optional)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = [h.strip() for h in rows[0]]
    has_label = bool(header) and header[0] == "label"
    rate_col = 1 if has_label else 0
    if len(header) <= rate_col or header[rate_col] != "rate_hz":
        raise CsvFormatError(1, "header must start with 'label,rate_hz' or 'rate_hz'")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            label = None
            if has_label and row[0].strip():
                label = int(row[0])
            rate = float(row[rate_col])
            cells = [c for c in row[rate_col + 1:] if c.strip()]
            samples = np.array([float(c) for c in cells])
            out.append(Waveform(samples, rate, label))
        except (ValueError, IndexError) as exc:
            raise CsvFormatError(lineno, str(exc)) from exc
    return out
