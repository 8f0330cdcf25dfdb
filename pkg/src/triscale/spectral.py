"""Discrete spectra of trajectories and dominant-peak extraction.

A signal is resampled uniformly on [t_start, t_start + T) from the dense
interpolant, transformed with a rectangular window, and reported as one-sided
magnitudes scaled so a unit-amplitude sinusoid centred on a bin reads 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import write_csv
from .timestep import Trajectory


class SpectrumError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Spectrum:
    frequencies: np.ndarray   # ordinary frequency, 0 .. Nyquist
    magnitudes: np.ndarray
    window_length: float
    samples: np.ndarray       # the resampled signal

    @property
    def bin_width(self) -> float:
        return 1.0 / self.window_length

    def power(self) -> float:
        """Mean square reconstructed from the one-sided magnitudes."""
        m = self.magnitudes
        n = self.samples.size
        inner = m[1:-1] if n % 2 == 0 else m[1:]
        total = m[0] ** 2 + 0.5 * np.sum(inner**2)
        if n % 2 == 0:
            total += m[-1] ** 2
        return float(total)

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, ["frequency", "magnitude"], np.column_stack([self.frequencies, self.magnitudes]))


def spectrum_of_samples(samples, window_length: float) -> Spectrum:
    """Spectrum of a uniformly sampled record covering ``window_length``."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 2 or n & (n - 1):
        raise SpectrumError("number of samples must be a power of two")
    coeffs = np.fft.rfft(x) / n
    mags = np.abs(coeffs)
    mags[1:(n + 1) // 2] *= 2.0
    freqs = np.arange(mags.size) / window_length
    for arr in (freqs, mags, x):
        arr.setflags(write=False)
    return Spectrum(freqs, mags, float(window_length), x)


def spectrum(source, component: int = 0, n_samples: int = 4096, window_length: float | None = None,
             t_start: float | None = None) -> Spectrum:
    """Spectrum of one state entry of a trajectory (or of a callable f(t)).

    For trajectories the window defaults to the last ``window_length`` time
    units of the run.
    """
    if n_samples < 2 or n_samples & (n_samples - 1):
        raise SpectrumError("n_samples must be a power of two")
    if isinstance(source, Trajectory):
        span = source.t_end - source.t_start
        if window_length is None:
            window_length = span
        if window_length > span * (1 + 1e-12):
            raise SpectrumError(f"window {window_length} longer than the trajectory span {span}")
        if t_start is None:
            t_start = source.t_end - window_length
        if t_start < source.t_start - 1e-9 or t_start + window_length > source.t_end + 1e-9 * max(1, span):
            raise SpectrumError("window falls outside the trajectory")
        times = t_start + window_length * np.arange(n_samples) / n_samples
        times = np.clip(times, source.t_start, source.t_end)
        values = source.sample_component(times, component)
    else:
        if window_length is None:
            raise SpectrumError("window_length is required for a callable source")
        t_start = 0.0 if t_start is None else t_start
        times = t_start + window_length * np.arange(n_samples) / n_samples
        values = np.asarray(source(times), dtype=float)
    return spectrum_of_samples(values, window_length)


@dataclass(frozen=True)
class Peak:
    frequency: float
    magnitude: float
    bin_index: int


@dataclass(frozen=True)
class PeakList:
    peaks: tuple[Peak, ...]
    bin_width: float

    def __len__(self) -> int:
        return len(self.peaks)

    def __getitem__(self, i) -> Peak:
        return self.peaks[i]

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([p.frequency for p in self.peaks])

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, ["frequency", "magnitude", "bin_index"],
                  [(p.frequency, p.magnitude, p.bin_index) for p in self.peaks])


def _refine(mags: np.ndarray, k: int) -> tuple[float, float]:
    """Vertex of the parabola through the log-magnitudes at bins k-1, k, k+1."""
    if k == 0 or k == mags.size - 1:
        return 0.0, float(mags[k])
    if max(mags[k - 1], mags[k + 1]) <= 1e-12 * mags[k]:
        return 0.0, float(mags[k])  # neighbours are round-off: the tone sits on the bin
    tiny = np.finfo(float).tiny
    lm, l0, lp = (math.log(max(mags[j], tiny)) for j in (k - 1, k, k + 1))
    denom = lm - 2 * l0 + lp
    if denom >= 0:
        return 0.0, float(mags[k])
    delta = 0.5 * (lm - lp) / denom
    return delta, math.exp(l0 - 0.25 * (lm - lp) * delta)


def dominant_peaks(spec: Spectrum, n: int = 3, floor: float = 0.01) -> PeakList:
    """Up to ``n`` local maxima above ``floor`` times the largest magnitude.

    Peaks closer than two bins to a stronger one are dropped.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    m = spec.magnitudes
    if m.size < 3 or np.max(m) == 0:
        return PeakList((), spec.bin_width)
    threshold = floor * np.max(m)
    padded = np.concatenate(([-np.inf], m, [-np.inf]))
    is_max = (padded[1:-1] > padded[:-2]) & (padded[1:-1] >= padded[2:]) & (m >= threshold)
    candidates = sorted(np.flatnonzero(is_max), key=lambda k: (-m[k], k))
    chosen: list[int] = []
    for k in candidates:
        if all(abs(k - j) >= 2 for j in chosen):
            chosen.append(int(k))
        if len(chosen) == n:
            break
    peaks = []
    for k in chosen:
        delta, mag = _refine(m, k)
        peaks.append(Peak((k + delta) * spec.bin_width, mag, k))
    peaks.sort(key=lambda p: (-p.magnitude, p.bin_index))
    return PeakList(tuple(peaks), spec.bin_width)
