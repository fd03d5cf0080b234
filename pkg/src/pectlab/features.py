"""Multimodal views of one ECG window: filtered temporal trace, Morlet
scalogram and trimmed FFT magnitude spectrum."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .signal_core import Waveform, z_normalize_array

MODALITIES = ("temporal", "scalogram", "spectrum")


@dataclass(frozen=True)
class FeatureConfig:
    temporal_len: int = 256
    scalogram_size: int = 32
    spectrum_bins: int = 32
    band_hz: tuple[float, float] = (0.5, 40.0)
    denoise: str = "universal"  # or "none"
    cwt_freq_range_hz: tuple[float, float] = (1.0, 40.0)
    morlet_w0: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "band_hz", tuple(float(v) for v in self.band_hz))
        object.__setattr__(self, "cwt_freq_range_hz", tuple(float(v) for v in self.cwt_freq_range_hz))
        if self.temporal_len < 8:
            raise ValueError("temporal_len must be >= 8")
        if self.scalogram_size < 4 or self.spectrum_bins < 4:
            raise ValueError("scalogram_size and spectrum_bins must be >= 4")
        lo, hi = self.band_hz
        if not 0 <= lo < hi:
            raise ValueError(f"invalid band edges {self.band_hz}")
        flo, fhi = self.cwt_freq_range_hz
        if not 0 < flo < fhi:
            raise ValueError(f"invalid CWT frequency range {self.cwt_freq_range_hz}")
        if self.denoise not in ("universal", "none"):
            raise ValueError(f"unknown denoise mode {self.denoise!r}")

    def validate_for_rate(self, rate: float) -> None:
        if not self.band_hz[1] < rate / 2:
            raise ValueError(f"band upper edge {self.band_hz[1]} Hz must be below Nyquist {rate / 2} Hz")
        if not self.cwt_freq_range_hz[1] < rate / 2:
            raise ValueError("CWT frequency range must stay below Nyquist")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band_hz"] = list(self.band_hz)
        d["cwt_freq_range_hz"] = list(self.cwt_freq_range_hz)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class ModalityBundle:
    temporal: np.ndarray
    scalogram: np.ndarray
    spectrum: np.ndarray
    label: int | None = None

    def view(self, modality: str) -> np.ndarray:
        return getattr(self, modality)

    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return self.temporal.shape, self.scalogram.shape, self.spectrum.shape


# --------------------------------------------------------------------------
# filtering


def bandpass_gain(freqs: np.ndarray, lo_hz: float, hi_hz: float, rolloff_hz: float = 1.0) -> np.ndarray:
    """Raised-cosine band mask; each edge ramps over ``edge +/- rolloff/2``."""
    half = rolloff_hz / 2.0
    g = np.ones_like(freqs, dtype=np.float64)
    if lo_hz > 0:
        ramp = np.clip((freqs - (lo_hz - half)) / rolloff_hz, 0.0, 1.0)
        g *= 0.5 - 0.5 * np.cos(np.pi * ramp)
    ramp = np.clip(((hi_hz + half) - freqs) / rolloff_hz, 0.0, 1.0)
    g *= 0.5 - 0.5 * np.cos(np.pi * ramp)
    return g


def bandpass(w: Waveform, lo_hz: float, hi_hz: float) -> Waveform:
    nyq = w.sample_rate_hz / 2.0
    if not 0 <= lo_hz < hi_hz < nyq:
        raise ValueError(f"band edges must satisfy 0 <= lo < hi < {nyq}, got ({lo_hz}, {hi_hz})")
    n = len(w)
    spec = np.fft.rfft(w.samples)
    freqs = np.fft.rfftfreq(n, d=1.0 / w.sample_rate_hz)
    return w.replace(np.fft.irfft(spec * bandpass_gain(freqs, lo_hz, hi_hz), n=n))


def haar_dwt(x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Full-depth orthonormal Haar transform of a power-of-two length signal.

    Returns the final approximation and the detail bands, finest first.
    """
    a = np.asarray(x, dtype=np.float64)
    n = a.size
    if n & (n - 1):
        raise ValueError("haar_dwt needs a power-of-two length")
    details = []
    s = 1.0 / math.sqrt(2.0)
    while a.size > 1:
        even, odd = a[0::2], a[1::2]
        details.append((even - odd) * s)
        a = (even + odd) * s
    return a, details


def haar_idwt(approx: np.ndarray, details: list[np.ndarray]) -> np.ndarray:
    a = np.asarray(approx, dtype=np.float64)
    s = 1.0 / math.sqrt(2.0)
    for d in reversed(details):
        out = np.empty(2 * a.size)
        out[0::2] = (a + d) * s
        out[1::2] = (a - d) * s
        a = out
    return a


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def wavelet_denoise(w: Waveform, threshold: float | None = None) -> Waveform:
    """Haar soft-threshold denoising.

    ``threshold=None`` uses the universal threshold
    ``median(|finest details|) / 0.6745 * sqrt(2 ln n)``.
    """
    n = len(w)
    m = 1 << (n - 1).bit_length()
    padded = np.zeros(m)
    padded[:n] = w.samples
    approx, details = haar_dwt(padded)
    if threshold is None:
        sigma = np.median(np.abs(details[0])) / 0.6745
        threshold = sigma * math.sqrt(2.0 * math.log(n))
    if threshold > 0:
        details = [soft_threshold(d, threshold) for d in details]
    return w.replace(haar_idwt(approx, details)[:n])


def resample_to_length(x: np.ndarray, length: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == length:
        return x.copy()
    src = np.linspace(0.0, x.size - 1, length)
    return np.interp(src, np.arange(x.size), x)


# --------------------------------------------------------------------------
# spectral views


def fft_magnitude_raw(w: Waveform, k: int) -> np.ndarray:
    if k > len(w) // 2:
        raise ValueError(f"requested {k} bins but only {len(w) // 2} are available")
    return np.abs(np.fft.rfft(w.samples))[:k]


def fft_magnitude(w: Waveform, k: int) -> np.ndarray:
    """First ``k`` DFT magnitudes, z-normalized."""
    return z_normalize_array(fft_magnitude_raw(w, k))[0]


def cwt_scales(n_scales: int, rate: float, freq_range_hz: tuple[float, float], w0: float = 6.0) -> np.ndarray:
    """Log-spaced Morlet scales (in samples), lowest frequency first."""
    flo, fhi = freq_range_hz
    freqs = np.geomspace(flo, fhi, n_scales)
    return w0 * rate / (2.0 * np.pi * freqs)


def scale_center_freq(scale: float, rate: float, w0: float = 6.0) -> float:
    return w0 * rate / (2.0 * np.pi * scale)


def morlet(t: np.ndarray, w0: float = 6.0) -> np.ndarray:
    return np.pi ** -0.25 * np.exp(1j * w0 * t - 0.5 * t * t)


def morlet_half_width(scale: float, n: int) -> int:
    """Kernel support ``|m| <= ceil(4 * scale)``, capped where it can no longer overlap the signal."""
    return min(int(math.ceil(4.0 * scale)), n - 1)


def cwt_shifts(n: int, size: int) -> np.ndarray:
    """Centers of ``size`` equal segments of ``range(n)``."""
    return ((np.arange(size) + 0.5) * n / size).astype(np.int64)


def cwt_scalogram(
    w: Waveform,
    size: int,
    freq_range_hz: tuple[float, float] = (1.0, 40.0),
    w0: float = 6.0,
) -> np.ndarray:
    """``|<x, psi_{s,tau}>|`` on a ``size x size`` grid (rows: scales, columns: shifts).

    Each row is a full correlation with the scaled Morlet kernel done by FFT,
    sampled at the shift grid.
    """
    x = w.samples
    n = x.size
    if n < size:
        raise ValueError(f"signal of length {n} is shorter than scalogram size {size}")
    scales = cwt_scales(size, w.sample_rate_hz, freq_range_hz, w0)
    shifts = cwt_shifts(n, size)
    half = [morlet_half_width(s, n) for s in scales]
    nfft = 1 << (n + 2 * max(half)).bit_length()
    xf = np.fft.fft(x, nfft)
    out = np.empty((size, size))
    for j, (s, m) in enumerate(zip(scales, half)):
        taps = np.arange(-m, m + 1)
        kern = np.conj(morlet(taps / s, w0))[::-1] / math.sqrt(s)
        full = np.fft.ifft(xf * np.fft.fft(kern, nfft))
        # full[tau + m] = sum_k x[tau + k] * conj(psi_s[k])
        out[j] = np.abs(full[shifts + m])
    return out


# --------------------------------------------------------------------------
# bundle assembly


def filtered_window(w: Waveform, cfg: FeatureConfig) -> Waveform:
    cfg.validate_for_rate(w.sample_rate_hz)
    filt = bandpass(w, *cfg.band_hz)
    if cfg.denoise == "universal":
        filt = wavelet_denoise(filt)
    return filt


def extract_bundle(w: Waveform, cfg: FeatureConfig) -> ModalityBundle:
    filt = filtered_window(w, cfg)
    temporal = z_normalize_array(resample_to_length(filt.samples, cfg.temporal_len))[0]
    scalogram = cwt_scalogram(filt, cfg.scalogram_size, cfg.cwt_freq_range_hz, cfg.morlet_w0)
    spectrum = fft_magnitude(filt, cfg.spectrum_bins)
    return ModalityBundle(temporal, scalogram, spectrum, w.label)


def stack_views(bundles: list[ModalityBundle]) -> dict[str, np.ndarray]:
    """Batch arrays keyed by modality name."""
    return {m: np.stack([b.view(m) for b in bundles]) for m in MODALITIES}


# --------------------------------------------------------------------------
# binary records: little-endian header then float64 payload

BUNDLE_MAGIC = b"PECB"
BUNDLE_VERSION = 1
_HEADER = struct.Struct("<4sHIIIi")


def encode_bundle(b: ModalityBundle) -> bytes:
    t, s, k = b.temporal.size, b.scalogram.shape[0], b.spectrum.size
    label = -1 if b.label is None else int(b.label)
    head = _HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, t, s, k, label)
    payload = np.concatenate([b.temporal.ravel(), b.scalogram.ravel(), b.spectrum.ravel()])
    return head + payload.astype("<f8").tobytes()


def decode_bundles(blob: bytes) -> list[ModalityBundle]:
    out = []
    pos = 0
    while pos < len(blob):
        if len(blob) - pos < _HEADER.size:
            raise ValueError(f"truncated bundle header at byte {pos}")
        magic, version, t, s, k, label = _HEADER.unpack_from(blob, pos)
        if magic != BUNDLE_MAGIC or version != BUNDLE_VERSION:
            raise ValueError(f"bad bundle header at byte {pos}")
        pos += _HEADER.size
        count = t + s * s + k
        vals = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        out.append(
            ModalityBundle(vals[:t].copy(), vals[t:t + s * s].reshape(s, s).copy(), vals[t + s * s:].copy(),
                           None if label < 0 else label)
        )
    return out


def write_bundles(bundles: Iterable[ModalityBundle], path: str | Path) -> None:
    with open(path, "wb") as fh:
        for b in bundles:
            fh.write(encode_bundle(b))


def read_bundles(path: str | Path) -> list[ModalityBundle]:
    return decode_bundles(Path(path).read_bytes())
