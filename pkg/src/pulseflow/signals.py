"""Windowing, filtering, spectral estimation and pulse-rate readout."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import firwin

from .errors import ArgumentError, BandError, DegenerateDenominatorError

DEFAULT_BAND = (42.0, 150.0)


@dataclass
class SignalWindow:
    """T x R block of samples at a fixed rate."""

    samples: np.ndarray
    sample_rate: float
    region_labels: list[str] = field(default_factory=list)
    t_start: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 2 or s.shape[1] < 1:
            raise ArgumentError(f"samples must be T x R with T >= 2, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ArgumentError("samples must be finite")
        if not self.sample_rate > 0:
            raise ArgumentError("sample_rate must be positive")
        self.samples = s
        if not self.region_labels:
            self.region_labels = [f"region{i + 1}" for i in range(s.shape[1])]
        if len(self.region_labels) != s.shape[1]:
            raise ArgumentError("one region label per channel required")

    @property
    def length(self) -> int:
        return self.samples.shape[0]

    @property
    def n_regions(self) -> int:
        return self.samples.shape[1]

    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.length) / self.sample_rate

    def with_samples(self, samples) -> "SignalWindow":
        return SignalWindow(samples, self.sample_rate, list(self.region_labels), self.t_start)


@dataclass
class SpectrumEstimate:
    """One-sided power per bin; ``power`` is (L, R), one column per channel."""

    power: np.ndarray
    bin_freqs_bpm: np.ndarray
    band_lo_bpm: float = DEFAULT_BAND[0]
    band_hi_bpm: float = DEFAULT_BAND[1]

    def __post_init__(self):
        p = np.asarray(self.power, dtype=np.float64)
        if p.ndim == 1:
            p = p[:, None]
        self.power = p
        self.bin_freqs_bpm = np.asarray(self.bin_freqs_bpm, dtype=np.float64)
        if p.shape[0] != self.bin_freqs_bpm.shape[0]:
            raise ArgumentError("power and bin grid lengths differ")
        if np.any(p < 0):
            raise ArgumentError("power must be nonnegative")
        if np.any(np.diff(self.bin_freqs_bpm) <= 0):
            raise ArgumentError("bin frequencies must be strictly increasing")
        if not self.band_lo_bpm < self.band_hi_bpm:
            raise BandError("band_lo must be below band_hi")

    def total(self) -> np.ndarray:
        """Power summed over channels."""
        return self.power.sum(axis=1)


def design_bandpass(passband_lo: float, passband_hi: float, taps: int, fs: float) -> np.ndarray:
    """Hamming windowed-sinc bandpass, band edges in bpm."""
    if taps < 3 or taps % 2 == 0:
        raise ArgumentError(f"taps must be odd and >= 3, got {taps}")
    nyq_bpm = 30.0 * fs
    if not 0 < passband_lo < passband_hi < nyq_bpm:
        raise BandError(f"need 0 < lo < hi < {nyq_bpm} bpm, got [{passband_lo}, {passband_hi}]")
    return firwin(taps, [passband_lo / 60.0, passband_hi / 60.0], pass_zero=False,
                  window="hamming", fs=fs)


def frequency_response(h: np.ndarray, freq_hz, fs: float) -> np.ndarray:
    """Complex response of a zero-phase-centred FIR at ``freq_hz``."""
    n = np.arange(len(h)) - (len(h) - 1) / 2
    w = 2 * np.pi * np.atleast_1d(freq_hz)[:, None] / fs
    return (h[None, :] * np.exp(-1j * w * n[None, :])).sum(axis=1)


def fir_bandpass(w: SignalWindow, passband_lo: float = DEFAULT_BAND[0],
                 passband_hi: float = DEFAULT_BAND[1], taps: int = 5) -> SignalWindow:
    """Linear-phase FIR bandpass per channel, delay-compensated ('same' alignment)."""
    h = design_bandpass(passband_lo, passband_hi, taps, w.sample_rate)
    out = np.column_stack([np.convolve(w.samples[:, r], h, mode="same")
                           for r in range(w.n_regions)])
    return w.with_samples(out)


def power_spectrum(w: SignalWindow, pad_factor: int = 10,
                   band: tuple[float, float] = DEFAULT_BAND) -> SpectrumEstimate:
    if w.length < 2:
        raise ArgumentError("need at least two samples")
    if pad_factor < 1:
        raise ArgumentError("pad_factor must be >= 1")
    n_fft = pad_factor * w.length
    windowed = w.samples * np.hanning(w.length)[:, None]
    spec = np.fft.rfft(windowed, n=n_fft, axis=0)
    power = spec.real ** 2 + spec.imag ** 2
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / w.sample_rate) * 60.0
    return SpectrumEstimate(power, freqs, band[0], band[1])


def estimate_pulse_rate(spectra: Sequence[SpectrumEstimate]) -> float:
    """Frequency (bpm) of maximal in-band power summed over channels and spectra.

    Ties go to the lowest frequency (``argmax`` returns the first hit).
    """
    if len(spectra) == 0:
        raise ArgumentError("no spectra given")
    ref = spectra[0]
    total = np.zeros(ref.bin_freqs_bpm.shape[0])
    for s in spectra:
        if (s.bin_freqs_bpm.shape != ref.bin_freqs_bpm.shape
                or not np.array_equal(s.bin_freqs_bpm, ref.bin_freqs_bpm)
                or (s.band_lo_bpm, s.band_hi_bpm) != (ref.band_lo_bpm, ref.band_hi_bpm)):
            raise ArgumentError("spectra do not share bin grid and band")
        total += s.total()
    mask = (ref.bin_freqs_bpm >= ref.band_lo_bpm) & (ref.bin_freqs_bpm <= ref.band_hi_bpm)
    if not mask.any():
        raise ArgumentError("no bins inside the band")
    idx = np.flatnonzero(mask)
    return float(ref.bin_freqs_bpm[idx[np.argmax(total[idx])]])


def pulse_rate_of(samples: np.ndarray, fs: float, pad_factor: int = 10,
                  band: tuple[float, float] = DEFAULT_BAND) -> float:
    """Pulse rate of a stack of windows shaped (..., T, R)."""
    samples = np.asarray(samples, dtype=np.float64)
    stack = samples.reshape(-1, *samples.shape[-2:]) if samples.ndim > 2 else samples[None]
    spectra = [power_spectrum(SignalWindow(s, fs), pad_factor, band) for s in stack]
    return estimate_pulse_rate(spectra)


def channel_ratio(red, green, eps: float = 1e-12) -> np.ndarray:
    red = np.asarray(red, dtype=np.float64)
    green = np.asarray(green, dtype=np.float64)
    if red.shape != green.shape:
        raise ArgumentError(f"length mismatch: {red.shape} vs {green.shape}")
    bad = np.flatnonzero(np.abs(green.reshape(-1)) <= eps)
    if bad.size:
        i = int(bad[0])
        raise DegenerateDenominatorError(i, float(green.reshape(-1)[i]))
    return red / green


def extract_windows(series, length: int, stride: int, sample_rate: float = 1.0,
                    region_labels: list[str] | None = None) -> list[SignalWindow]:
    """Windows at offsets 0, stride, 2*stride, ... that fit entirely."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    total = series.shape[0]
    if length > total:
        raise ArgumentError(f"window length {length} exceeds series length {total}")
    if stride < 1 or length < 2:
        raise ArgumentError("stride must be >= 1 and length >= 2")
    count = (total - length) // stride + 1
    labels = list(region_labels) if region_labels else []
    return [SignalWindow(series[i * stride:i * stride + length], sample_rate, labels,
                         i * stride / sample_rate) for i in range(count)]


def standardize(x: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Zero-mean, unit-variance along the time axis (axis -2)."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-2, keepdims=True)
    sd = x.std(axis=-2, keepdims=True)
    return (x - mu) / np.maximum(sd, floor)


# ---------------------------------------------------------------- CSV I/O


def write_series_csv(path, samples: np.ndarray, sample_rate: float, labels: Sequence[str],
                     t_start: float = 0.0) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["time", *labels])
        for k, row in enumerate(samples):
            wr.writerow([repr(float(t_start + k / sample_rate)), *(repr(float(v)) for v in row)])


def read_series_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Return ``(times, samples, labels)`` from a ``time,<regions...>`` CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "time" or len(rows[0]) < 2:
        raise ArgumentError(f"{path}: expected header 'time,<region1>,...'")
    labels = rows[0][1:]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise ArgumentError(f"{path}: non-numeric entry ({exc})") from exc
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] != len(labels) + 1:
        raise ArgumentError(f"{path}: ragged or too short")
    return data[:, 0], data[:, 1:], labels


def sample_rate_from_times(times: np.ndarray) -> float:
    dt = np.diff(times)
    if np.any(dt <= 0) or not np.allclose(dt, dt[0], rtol=1e-6, atol=1e-9):
        raise ArgumentError("time column must be uniformly increasing")
    return float(1.0 / dt.mean())


def write_spectrum_csv(path, spec: SpectrumEstimate) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["freq_bpm", *(f"power_ch{i + 1}" for i in range(spec.power.shape[1]))])
        for f, row in zip(spec.bin_freqs_bpm, spec.power):
            wr.writerow([repr(float(f)), *(repr(float(v)) for v in row)])


def read_spectrum_csv(path, band: tuple[float, float] = DEFAULT_BAND) -> SpectrumEstimate:
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return SpectrumEstimate(data[:, 1:], data[:, 0], band[0], band[1])


RATIO_ORDERS = ("ratio_first", "filter_first")


def preprocess_color(red: SignalWindow, green: SignalWindow, order: str = "ratio_first",
                     passband_lo: float = DEFAULT_BAND[0], passband_hi: float = DEFAULT_BAND[1],
                     taps: int = 5, eps: float = 1e-12) -> SignalWindow:
    """Red/green ratio combined with the bandpass in either order.

    ``filter_first`` bandpasses both colour channels before dividing.  With a
    selective filter the green channel loses its DC level and the ratio becomes
    ill-conditioned, which is why ``ratio_first`` is the default.
    """
    if order not in RATIO_ORDERS:
        raise ArgumentError(f"order must be one of {RATIO_ORDERS}")
    if red.samples.shape != green.samples.shape or red.sample_rate != green.sample_rate:
        raise ArgumentError("red and green windows must share shape and rate")
    if order == "ratio_first":
        return fir_bandpass(red.with_samples(channel_ratio(red.samples, green.samples, eps)),
                            passband_lo, passband_hi, taps)
    r = fir_bandpass(red, passband_lo, passband_hi, taps)
    g = fir_bandpass(green, passband_lo, passband_hi, taps)
    return red.with_samples(channel_ratio(r.samples, g.samples, eps))
