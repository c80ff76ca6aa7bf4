"""Paired synthetic pulse / measurement tracks with a controllable corruption."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigError
from .signals import DEFAULT_BAND, SignalWindow


@dataclass
class SynthConfig:
    heart_rate_range: tuple[float, float] = (50.0, 120.0)
    harmonic_ratio: float = 0.3
    region_gains: tuple[float, ...] = (1.0, 0.8, 0.9, 0.7, 0.6)
    distractor_amp: float = 0.5
    distractor_freq_range: tuple[float, float] = (45.0, 140.0)
    noise_std: float = 0.5
    baseline_wander_amp: float = 0.5
    motion_burst_prob: float = 0.0
    motion_burst_amp: float = 3.0
    seed: int = 0

    def __post_init__(self):
        self.heart_rate_range = tuple(float(v) for v in self.heart_rate_range)
        self.distractor_freq_range = tuple(float(v) for v in self.distractor_freq_range)
        self.region_gains = tuple(float(v) for v in self.region_gains)
        self.validate()

    def validate(self) -> None:
        lo, hi = self.heart_rate_range
        if not (DEFAULT_BAND[0] <= lo <= hi <= DEFAULT_BAND[1]):
            raise ConfigError(f"heart_rate_range must be ordered inside {DEFAULT_BAND}, got {self.heart_rate_range}")
        dlo, dhi = self.distractor_freq_range
        if not 0 < dlo <= dhi:
            raise ConfigError("distractor_freq_range must be ordered and positive")
        if not 0 <= self.harmonic_ratio < 1:
            raise ConfigError("harmonic_ratio must lie in [0, 1)")
        if not self.region_gains:
            raise ConfigError("region_gains must be non-empty")
        for name in ("distractor_amp", "noise_std", "baseline_wander_amp", "motion_burst_amp"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and nonnegative")
        if not np.all(np.isfinite(self.region_gains)):
            raise ConfigError("region_gains must be finite")
        if not 0 <= self.motion_burst_prob <= 1:
            raise ConfigError("motion_burst_prob must lie in [0, 1]")

    @property
    def n_regions(self) -> int:
        return len(self.region_gains)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("heart_rate_range", "distractor_freq_range", "region_gains"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def generate_pulse(cfg: SynthConfig, f: float, T: int, fs: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Unit-amplitude fundamental at ``f`` bpm plus one harmonic."""
    if not DEFAULT_BAND[0] <= f <= DEFAULT_BAND[1]:
        raise ArgumentError(f"rate {f} bpm outside {DEFAULT_BAND}")
    if T < 2:
        raise ArgumentError("T must be >= 2")
    phi, phi2 = rng.uniform(0.0, 2 * np.pi, size=2)
    k = np.arange(T)
    arg = 2 * np.pi * f * k / (60.0 * fs)
    return np.sin(arg + phi) + cfg.harmonic_ratio * np.sin(2 * arg + phi2)


def _motion_bursts(T: int, fs: float, amp: float, prob: float, rng) -> np.ndarray:
    """Short Hann-tapered ramps; one Bernoulli(prob) trial per 10 s segment."""
    out = np.zeros(T)
    seg = max(int(round(10 * fs)), 1)
    width = max(int(round(fs)), 2)
    for start in range(0, T, seg):
        if rng.uniform() >= prob:
            continue
        pos = start + int(rng.integers(0, seg))
        if pos >= T:
            continue
        n = min(width, T - pos)
        sign = rng.choice([-1.0, 1.0])
        ramp = np.linspace(0.0, 1.0, width)[:n] * np.hanning(width)[:n]
        out[pos:pos + n] += sign * amp * ramp
    return out


def forward_corrupt(x0: np.ndarray, cfg: SynthConfig, rng: np.random.Generator,
                    fs: float = 25.0) -> SignalWindow:
    """Channel r = gain_r * x0 + distractor + wander + noise (+ bursts)."""
    x0 = np.asarray(x0, dtype=np.float64)
    T = x0.shape[0]
    k = np.arange(T)
    channels = []
    for gain in cfg.region_gains:
        ch = gain * x0
        fd = rng.uniform(*cfg.distractor_freq_range)
        ph = rng.uniform(0.0, 2 * np.pi)
        if cfg.distractor_amp:
            ch = ch + cfg.distractor_amp * np.sin(2 * np.pi * fd * k / (60.0 * fs) + ph)
        fw = rng.uniform(0.1, 0.3)
        pw = rng.uniform(0.0, 2 * np.pi)
        if cfg.baseline_wander_amp:
            ch = ch + cfg.baseline_wander_amp * np.sin(2 * np.pi * fw * k / fs + pw)
        noise = rng.standard_normal(T)
        if cfg.noise_std:
            ch = ch + cfg.noise_std * noise
        if cfg.motion_burst_prob > 0:
            ch = ch + _motion_bursts(T, fs, cfg.motion_burst_amp, cfg.motion_burst_prob, rng)
        channels.append(ch)
    labels = [f"region{i + 1}" for i in range(cfg.n_regions)]
    return SignalWindow(np.column_stack(channels), fs, labels)


@dataclass
class Subject:
    subject_id: str
    rate_bpm: float
    pulse: np.ndarray
    measurements: np.ndarray
    seed: int

    def paired(self) -> tuple[np.ndarray, np.ndarray]:
        """(x0, x1) with the pulse replicated to every region."""
        r = self.measurements.shape[1]
        return np.repeat(self.pulse[:, None], r, axis=1), self.measurements


@dataclass
class SynthDataset:
    config: SynthConfig
    fs: float
    duration: float
    subjects: list[Subject] = field(default_factory=list)

    @property
    def region_labels(self) -> list[str]:
        return [f"region{i + 1}" for i in range(self.config.n_regions)]

    def manifest(self) -> dict:
        return {
            "kind": "synth_dataset",
            "fs": self.fs,
            "duration": self.duration,
            "n_subjects": len(self.subjects),
            "region_labels": self.region_labels,
            "config": self.config.to_dict(),
            "subjects": [
                {"id": s.subject_id, "file": f"{s.subject_id}.csv", "seed": s.seed,
                 "rate_schedule": [[0.0, s.rate_bpm]]}
                for s in self.subjects
            ],
        }


def make_subject(cfg: SynthConfig, index: int, n_samples: int, fs: float) -> Subject:
    seed = cfg.seed + index
    rng = np.random.default_rng(seed)
    rate = float(rng.uniform(*cfg.heart_rate_range))
    pulse = generate_pulse(cfg, rate, n_samples, fs, rng)
    meas = forward_corrupt(pulse, cfg, rng, fs).samples
    return Subject(f"subject_{index:03d}", rate, pulse, meas, seed)


def make_dataset(cfg: SynthConfig, n_subjects: int, duration: float, fs: float,
                 window_length: int | None = None) -> SynthDataset:
    if n_subjects < 1:
        raise ArgumentError("n_subjects must be >= 1")
    n_samples = int(round(duration * fs))
    window_length = int(round(10 * fs)) if window_length is None else window_length
    if n_samples < window_length:
        raise ArgumentError(f"duration*fs = {n_samples} shorter than window length {window_length}")
    subjects = [make_subject(cfg, i, n_samples, fs) for i in range(n_subjects)]
    return SynthDataset(cfg, float(fs), float(duration), subjects)


def write_dataset(ds: SynthDataset, directory, manifest_name: str = "manifest.json") -> dict:
    """One ``time,pulse,<regions>`` CSV per subject plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in ds.subjects:
        with open(directory / f"{s.subject_id}.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["time", "pulse", *ds.region_labels])
            for k in range(s.pulse.shape[0]):
                wr.writerow([repr(k / ds.fs), repr(float(s.pulse[k])),
                             *(repr(float(v)) for v in s.measurements[k])])
    manifest = ds.manifest()
    (directory / manifest_name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(directory, manifest_name: str = "manifest.json") -> SynthDataset:
    directory = Path(directory)
    mpath = directory / manifest_name
    if not mpath.exists():
        raise ArgumentError(f"no dataset manifest in {directory}")
    manifest = json.loads(mpath.read_text())
    cfg = SynthConfig.from_dict(manifest["config"])
    subjects = []
    for entry in manifest["subjects"]:
        data = np.loadtxt(directory / entry["file"], delimiter=",", skiprows=1, ndmin=2)
        subjects.append(Subject(entry["id"], float(entry["rate_schedule"][0][1]),
                                data[:, 1], data[:, 2:], int(entry["seed"])))
    return SynthDataset(cfg, float(manifest["fs"]), float(manifest["duration"]), subjects)
