"""Label-preserving physiologic perturbations with exact energy accounting.

Operators are applied in a fixed order (amplitude, stretch, spectral
compression, noise) so that every sampled pair is reproducible from
``(spec.seed, sample_seed)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .signal_core import Waveform, energy_shift


def amplitude_scale(w: Waveform, a: float) -> Waveform:
    if not a > 0:
        raise ValueError(f"amplitude factor must be > 0, got {a}")
    return w.replace(w.samples * a)


def time_stretch(w: Waveform, r: float) -> Waveform:
    """Resample at positions ``i / r`` by linear interpolation.

    Length is preserved: for ``r > 1`` the tail of the input is never reached,
    for ``r < 1`` positions past the end hold the last sample.
    """
    if not r > 0:
        raise ValueError(f"stretch factor must be > 0, got {r}")
    if r == 1.0:
        return w.replace(w.samples.copy())
    n = len(w)
    pos = np.arange(n) / r
    return w.replace(np.interp(pos, np.arange(n), w.samples))


def spectral_compress(w: Waveform, c: float) -> Waveform:
    """Move spectral content at frequency ``f`` to ``c * f`` (``0 < c <= 1``).

    Output bin ``k`` takes the window's spectrum evaluated at fractional bin
    ``k / c``. The spectrum between bins is the band-limited interpolant of the
    DFT (a direct DTFT sum), which stays coherent for multi-beat windows where
    bin-to-bin phase steps exceed pi. Bins mapping past Nyquist are zeroed.
    """
    if not 0 < c <= 1:
        raise ValueError(f"compression factor must lie in (0, 1], got {c}")
    n = len(w)
    if c == 1.0:
        return w.replace(np.fft.irfft(np.fft.rfft(w.samples), n=n))
    bins = np.arange(n // 2 + 1)
    src = bins / c
    inside = src <= bins[-1]
    spec = np.zeros(bins.size, dtype=complex)
    kernel = np.exp(-2j * math.pi * np.outer(src[inside], np.arange(n)) / n)
    spec[inside] = kernel @ w.samples
    return w.replace(np.fft.irfft(spec, n=n))


def _noise_components(n: int, rate: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    freq = rng.uniform(0.2, 0.5)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    t = np.arange(n) / rate
    wander = np.sin(2.0 * math.pi * freq * t + phi)
    gauss = rng.standard_normal(n)
    return wander, gauss


def physiologic_noise(w: Waveform, snr_db: float, seed: int) -> np.ndarray:
    """The additive noise term alone (baseline wander + Gaussian), scaled to ``snr_db``."""
    n = len(w)
    if math.isinf(snr_db) and snr_db > 0:
        return np.zeros(n)
    if not snr_db > 0:
        raise ValueError(f"snr_db must be > 0 or +inf, got {snr_db}")
    wander, gauss = _noise_components(n, w.sample_rate_hz, seed)
    # equal-energy mix of respiration wander and sensor noise
    raw = wander / math.sqrt(np.dot(wander, wander) + 1e-300) + gauss / math.sqrt(np.dot(gauss, gauss))
    target = np.dot(w.samples, w.samples) / 10.0 ** (snr_db / 10.0)
    return raw * math.sqrt(target / np.dot(raw, raw))


def add_physiologic_noise(w: Waveform, snr_db: float, seed: int) -> Waveform:
    if math.isinf(snr_db) and snr_db > 0:
        return w.replace(w.samples.copy())
    return w.replace(w.samples + physiologic_noise(w, snr_db, seed))


@dataclass(frozen=True)
class PerturbationSpec:
    amplitude_scale_range: tuple[float, float] = (0.90, 1.10)
    stretch_range: tuple[float, float] = (0.92, 1.08)
    spectral_compress_range: tuple[float, float] = (0.95, 1.0)
    noise_snr_db: float = 25.0
    amplitude: bool = True
    stretch: bool = True
    spectral: bool = True
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("amplitude_scale_range", "stretch_range", "spectral_compress_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        if self.spectral_compress_range[1] > 1:
            raise ValueError("spectral_compress_range upper bound must be <= 1")
        if not (self.noise_snr_db > 0):
            raise ValueError("noise_snr_db must be > 0 or inf")

    @classmethod
    def identity(cls, seed: int = 0) -> "PerturbationSpec":
        return cls(amplitude=False, stretch=False, spectral=False, noise=False, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        if math.isinf(self.noise_snr_db):
            d["noise_snr_db"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSpec":
        d = dict(d)
        if "noise_snr_db" in d:
            d["noise_snr_db"] = float(d["noise_snr_db"])
        for k in ("amplitude_scale_range", "stretch_range", "spectral_compress_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PerturbedPair:
    clean: Waveform
    perturbed: Waveform
    delta_e: float
    applied: dict = field(default_factory=dict)


def perturb(w: Waveform, spec: PerturbationSpec, sample_seed: int, dt_weighted: bool = True) -> PerturbedPair:
    """Draw one parameter per operator and apply the enabled ones in order."""
    rng = np.random.default_rng([int(spec.seed), int(sample_seed)])
    # draw every parameter regardless of flags so enabling one operator never
    # changes the values sampled for another
    a = rng.uniform(*spec.amplitude_scale_range)
    r = rng.uniform(*spec.stretch_range)
    c = rng.uniform(*spec.spectral_compress_range)
    noise_seed = int(rng.integers(0, 2**31 - 1))

    out = w
    applied = {}
    if spec.amplitude:
        out = amplitude_scale(out, a)
        applied["amplitude"] = a
    if spec.stretch:
        out = time_stretch(out, r)
        applied["stretch"] = r
    if spec.spectral:
        out = spectral_compress(out, c)
        applied["spectral"] = c
    if spec.noise and not math.isinf(spec.noise_snr_db):
        out = add_physiologic_noise(out, spec.noise_snr_db, noise_seed)
        applied["noise_snr_db"] = spec.noise_snr_db
        applied["noise_seed"] = noise_seed
    if out is w:
        out = w.replace(w.samples.copy())
    return PerturbedPair(w, out, energy_shift(w, out, dt_weighted), applied)
