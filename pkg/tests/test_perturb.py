import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pectlab.perturb import (
    PerturbationSpec, add_physiologic_noise, amplitude_scale, perturb, physiologic_noise,
    spectral_compress, time_stretch,
)
from pectlab.signal_core import Waveform, energy, synth_ecg


@pytest.fixture
def ecg():
    return synth_ecg(1, 5, length=512, rate=256.0)


def direct_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * f * k / n)) for f in range(n // 2 + 1)])


def test_amplitude_examples(ecg):
    assert np.array_equal(amplitude_scale(ecg, 1.0).samples, ecg.samples)
    w = Waveform([1, 1, 1, 1], 1.0)
    assert energy(amplitude_scale(w, 1.1)) == pytest.approx(4.84, abs=1e-12)
    assert energy(amplitude_scale(ecg, 0.9)) / energy(ecg) == pytest.approx(0.81, rel=1e-12)
    assert amplitude_scale(ecg, 1.3).label == ecg.label


@pytest.mark.parametrize("op, bad", [(amplitude_scale, 0.0), (amplitude_scale, -1.0), (time_stretch, 0.0),
                                     (time_stretch, -0.5), (spectral_compress, 0.0), (spectral_compress, 1.01)])
def test_operator_domain(ecg, op, bad):
    with pytest.raises(ValueError):
        op(ecg, bad)


def test_time_stretch_ramp():
    out = time_stretch(Waveform(np.arange(8.0), 1.0), 2.0)
    assert np.allclose(out.samples, np.arange(8) / 2.0, atol=1e-15)


def test_time_stretch_edge_hold_and_constancy():
    out = time_stretch(Waveform(np.arange(8.0), 1.0), 0.5)
    assert np.allclose(out.samples[:4], [0, 2, 4, 6])
    assert np.all(out.samples[4:] == 7.0)
    c = time_stretch(Waveform(np.full(16, 3.25), 1.0), 0.5)
    assert np.array_equal(c.samples, np.full(16, 3.25))


def test_time_stretch_identity(ecg):
    assert np.array_equal(time_stretch(ecg, 1.0).samples, ecg.samples)


@given(st.floats(0.5, 2.0), st.integers(0, 50))
def test_time_stretch_interpolation_oracle(r, seed):
    x = np.random.default_rng(seed).standard_normal(40)
    out = time_stretch(Waveform(x, 1.0), r).samples
    for i in range(40):
        p = i / r
        if p >= 39:
            ref = x[-1]
        else:
            j = int(math.floor(p))
            ref = x[j] + (p - j) * (x[j + 1] - x[j])
        assert out[i] == pytest.approx(ref, abs=1e-12)
    assert len(out) == 40


def test_spectral_identity(ecg):
    assert np.max(np.abs(spectral_compress(ecg, 1.0).samples - ecg.samples)) < 1e-9


def test_spectral_zero_signal():
    assert np.array_equal(spectral_compress(Waveform(np.zeros(64), 1.0), 0.7).samples, np.zeros(64))


def test_spectral_sinusoid_peak_moves():
    n = 256
    x = np.cos(2 * np.pi * 16 * np.arange(n) / n)
    y = spectral_compress(Waveform(x, 1.0), 0.5).samples
    assert int(np.argmax(np.abs(direct_dft(y)))) == 8


def dirichlet_resample(x, f):
    """Spectrum at fractional bin ``f`` from the full DFT via periodic-sinc interpolation."""
    n = len(x)
    X = np.fft.fft(x)
    m = np.arange(n)
    d = f - m
    num = 1 - np.exp(-2j * np.pi * d)
    den = 1 - np.exp(-2j * np.pi * d / n)
    kern = np.where(np.abs(den) < 1e-14, n, num / np.where(np.abs(den) < 1e-14, 1, den)) / n
    return np.sum(X * kern)


@pytest.mark.parametrize("c", [0.95, 0.97, 0.99, 0.6])
def test_spectral_matches_dirichlet_interpolant(c):
    x = np.random.default_rng(3).standard_normal(33)
    y = spectral_compress(Waveform(x, 1.0), c).samples
    Y = np.fft.rfft(y)
    for k in range(len(Y)):
        ref = dirichlet_resample(x, k / c) if k / c <= len(x) // 2 else 0.0
        if k == len(Y) - 1 and len(x) % 2 == 0:
            ref = ref.real
        assert abs(Y[k] - ref) < 1e-9


@pytest.mark.parametrize("c", [0.95, 0.97, 0.99])
def test_spectral_energy_tracks_factor(ecg, c):
    assert energy(spectral_compress(ecg, c)) / energy(ecg) == pytest.approx(c, rel=0.05)


def test_noise_infinite_snr_identity(ecg):
    assert np.array_equal(add_physiologic_noise(ecg, math.inf, 3).samples, ecg.samples)


@pytest.mark.parametrize("snr", [10.0, 20.0, 25.0, 40.0])
def test_noise_measured_snr(ecg, snr):
    noise = physiologic_noise(ecg, snr, 9)
    measured = 10 * math.log10(energy(ecg, False) / float(np.dot(noise, noise)))
    assert snr - 0.5 <= measured <= snr + 0.5
    out = add_physiologic_noise(ecg, snr, 9)
    assert np.allclose(out.samples - ecg.samples, noise, atol=1e-12)


def test_noise_determinism(ecg):
    a, b = add_physiologic_noise(ecg, 20, 4), add_physiologic_noise(ecg, 20, 4)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, add_physiologic_noise(ecg, 20, 5).samples)


@pytest.mark.parametrize("snr", [0.0, -3.0, -math.inf])
def test_noise_domain(ecg, snr):
    with pytest.raises(ValueError):
        add_physiologic_noise(ecg, snr, 0)


@pytest.mark.parametrize("kw", [dict(amplitude_scale_range=(0.0, 1.0)), dict(stretch_range=(1.1, 0.9)),
                                dict(spectral_compress_range=(0.9, 1.1)), dict(noise_snr_db=0.0)])
def test_spec_invariants(kw):
    with pytest.raises(ValueError):
        PerturbationSpec(**kw)


def test_spec_round_trip():
    s = PerturbationSpec(noise_snr_db=math.inf, seed=3, stretch=False)
    assert PerturbationSpec.from_dict(s.to_dict()) == s


def test_perturb_all_disabled(ecg):
    p = perturb(ecg, PerturbationSpec.identity(), 1)
    assert np.array_equal(p.perturbed.samples, ecg.samples) and p.delta_e == 0.0


def test_perturb_amplitude_only(ecg):
    spec = PerturbationSpec(amplitude_scale_range=(1.1, 1.1), stretch=False, spectral=False, noise=False)
    p = perturb(ecg, spec, 0)
    assert p.delta_e == pytest.approx(0.21 * energy(ecg), rel=1e-12)


def test_perturb_collapsed_ranges_identity(ecg):
    spec = PerturbationSpec((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), math.inf)
    p = perturb(ecg, spec, 2)
    assert np.max(np.abs(p.perturbed.samples - ecg.samples)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3), st.booleans())
def test_perturb_pair_invariants(seed, cls, dt_weighted):
    w = synth_ecg(cls, seed, length=256, rate=128.0)
    spec = PerturbationSpec(seed=seed % 7)
    p = perturb(w, spec, seed, dt_weighted)
    assert p.perturbed.label == w.label == cls
    ref = energy(p.perturbed, dt_weighted) - energy(w, dt_weighted)
    assert abs(p.delta_e - ref) < 1e-9
    q = perturb(w, spec, seed, dt_weighted)
    assert np.array_equal(p.perturbed.samples, q.perturbed.samples)
    lo, hi = spec.amplitude_scale_range
    assert lo <= p.applied["amplitude"] <= hi


def test_perturb_flags_do_not_shift_draws(ecg):
    full = perturb(ecg, PerturbationSpec(), 17).applied
    part = perturb(ecg, PerturbationSpec(amplitude=False), 17).applied
    assert part["stretch"] == full["stretch"] and part["spectral"] == full["spectral"]
