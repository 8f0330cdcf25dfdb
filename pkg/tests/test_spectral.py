import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from triscale.model import OscillatorParams
from triscale.spectral import SpectrumError, dominant_peaks, spectrum, spectrum_of_samples
from triscale.timestep import OdeSystem, integrate


def _cos(freq, amp=1.0, phase=0.0):
    return lambda t: amp * np.cos(2 * math.pi * freq * t + phase)


def test_bin_aligned_cosine_reads_unit_magnitude():
    spec = spectrum(_cos(0.25), n_samples=4096, window_length=400.0)
    k = int(np.argmax(spec.magnitudes))
    assert spec.frequencies[k] == 0.25
    assert abs(spec.magnitudes[k] - 1.0) < 1e-10
    peaks = dominant_peaks(spec, n=5)
    assert len(peaks) == 1
    assert peaks[0].frequency == pytest.approx(0.25, abs=1e-12)
    assert abs(peaks[0].magnitude - 1.0) < 1e-10


def test_frequency_grid_is_uniform_up_to_nyquist():
    spec = spectrum(_cos(0.25), n_samples=1024, window_length=100.0)
    assert np.allclose(np.diff(spec.frequencies), spec.bin_width, rtol=0, atol=1e-12)
    assert spec.frequencies[0] == 0.0
    assert spec.frequencies[-1] == pytest.approx(0.5 * 1024 / 100.0, rel=1e-14)


def test_two_sinusoids_give_two_peaks():
    signal = lambda t: np.cos(2 * math.pi * 0.1 * t) + np.cos(2 * math.pi * 0.3 * t + 1.0)
    peaks = dominant_peaks(spectrum(signal, n_samples=4096, window_length=407.3), n=5)
    assert len(peaks) == 2
    assert np.allclose(sorted(peaks.frequencies), [0.1, 0.3], atol=1e-3)


def test_peaks_are_ordered_and_separated():
    signal = lambda t: 0.2 * np.cos(2 * math.pi * 0.1 * t) + np.cos(2 * math.pi * 0.35 * t)
    peaks = dominant_peaks(spectrum(signal, n_samples=2048, window_length=300.0), n=4)
    mags = [p.magnitude for p in peaks]
    assert mags == sorted(mags, reverse=True)
    bins = [p.bin_index for p in peaks]
    assert all(abs(i - j) >= 2 for i in bins for j in bins if i != j)


def test_flat_signal_has_no_peaks():
    spec = spectrum_of_samples(np.zeros(64), 10.0)
    assert len(dominant_peaks(spec)) == 0


@settings(max_examples=40, deadline=None)
@given(arrays(float, 256, elements=st.floats(-10, 10)))
def test_parseval(samples):
    spec = spectrum_of_samples(samples, 25.0)
    mean_square = float(np.mean(samples**2))
    assert spec.power() == pytest.approx(mean_square, rel=1e-8, abs=1e-300)


@settings(max_examples=40, deadline=None)
@given(arrays(float, 128, elements=st.floats(-5, 5)), arrays(float, 128, elements=st.floats(-5, 5)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_complex_coefficients_are_linear(f, g, a, b):
    # magnitudes are moduli, so linearity is checked on the signed cosine projection of a*f + b*g
    combo = spectrum_of_samples(a * f + b * g, 12.0)
    sf, sg = spectrum_of_samples(f, 12.0), spectrum_of_samples(g, 12.0)
    cf, cg, cc = (np.fft.rfft(s.samples) for s in (sf, sg, combo))
    assert np.allclose(cc, a * cf + b * cg, rtol=0, atol=1e-10 * max(1.0, np.max(np.abs(cc))))
    assert np.allclose(combo.frequencies, sf.frequencies, rtol=0, atol=0)


def test_spectrum_of_scaled_signal_scales():
    rng_free = np.sin(np.arange(512) * 0.37) + 0.3 * np.cos(np.arange(512) * 1.1)
    base, scaled = spectrum_of_samples(rng_free, 50.0), spectrum_of_samples(-2.5 * rng_free, 50.0)
    assert np.allclose(scaled.magnitudes, 2.5 * base.magnitudes, rtol=0, atol=1e-10)


def _offbin_errors(freq, windows, rate=16.0):
    errors = []
    for window in windows:
        spec = spectrum(_cos(freq), n_samples=int(window * rate), window_length=window)
        errors.append(abs(dominant_peaks(spec, n=1)[0].frequency - freq))
    return np.array(errors)


def test_doubling_window_at_least_halves_frequency_error():
    errors = _offbin_errors(0.2371, (128.0, 256.0, 512.0))
    assert np.all(errors[1:] <= errors[:-1] / 2)


def test_off_bin_frequency_error_scales_inversely_with_window():
    windows = np.array([128.0, 256.0, 512.0, 1024.0, 2048.0])
    for freq in (0.2371, (30 + 1 / 3) / 128):
        errors = _offbin_errors(freq, windows)
        slope = np.polyfit(np.log(windows), np.log(errors), 1)[0]
        assert slope == pytest.approx(-1.0, abs=0.1)


def test_trajectory_spectrum_finds_the_natural_frequency():
    p = OscillatorParams(omega=2 * math.pi * 0.25, epsilon=0.01)
    traj = integrate(OdeSystem.free_1dof(p), [0.01, 0.0], (0.0, 400.0))
    spec = spectrum(traj, n_samples=4096)
    assert spec.window_length == 400.0
    peaks = dominant_peaks(spec)
    assert len(peaks) == 1
    assert peaks[0].frequency == pytest.approx(0.25, abs=1e-6)
    assert peaks[0].magnitude == pytest.approx(0.01, rel=1e-6)


def test_trajectory_window_must_fit():
    p = OscillatorParams(epsilon=0.01)
    traj = integrate(OdeSystem.free_1dof(p), [0.01, 0.0], (0.0, 50.0))
    with pytest.raises(SpectrumError):
        spectrum(traj, window_length=60.0)
    with pytest.raises(SpectrumError):
        spectrum(traj, window_length=20.0, t_start=40.0)


@pytest.mark.parametrize("n", [0, 1, 1000, 4095])
def test_sample_count_must_be_power_of_two(n):
    with pytest.raises(SpectrumError):
        spectrum(_cos(0.1), n_samples=n, window_length=10.0)


def test_callable_needs_window():
    with pytest.raises(SpectrumError):
        spectrum(_cos(0.1), n_samples=64)


def test_peak_count_must_be_positive():
    with pytest.raises(ValueError):
        dominant_peaks(spectrum(_cos(0.25), n_samples=64, window_length=16.0), n=0)


def test_csv_outputs(tmp_path):
    spec = spectrum(_cos(0.25), n_samples=64, window_length=16.0)
    spec.to_csv(tmp_path / "s.csv")
    dominant_peaks(spec).to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "frequency,magnitude" and len(lines) == 34
    peaks = (tmp_path / "p.csv").read_text().splitlines()
    assert peaks[0] == "frequency,magnitude,bin_index"
    assert peaks[1].split(",")[2] == "4"
