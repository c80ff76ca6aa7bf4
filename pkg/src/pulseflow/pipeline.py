"""Glue used by the CLI and the acceptance suite: held-out windows, rate prediction, ablation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import signals, uq
from .sampler import NetworkFields, SamplerConfig, ensemble_windows
from .synth import SynthDataset
from .training import TrainConfig, prepare_tracks, train


@dataclass
class EvalWindows:
    x0: np.ndarray
    x1: np.ndarray
    gt_bpm: np.ndarray
    subject_ids: list[str]
    fs: float


def held_out_windows(dataset: SynthDataset, cfg: TrainConfig) -> EvalWindows:
    """Non-overlapping windows, preprocessed exactly as during training."""
    L = cfg.window_length
    x0s, x1s, ids = [], [], []
    for tr in prepare_tracks(dataset, cfg):
        for start in range(0, tr.x0.shape[0] - L + 1, L):
            x0s.append(signals.standardize(tr.x0[start:start + L]))
            x1s.append(signals.standardize(tr.x1[start:start + L]))
            ids.append(tr.subject_id)
    x0, x1 = np.stack(x0s), np.stack(x1s)
    gt = np.array([signals.pulse_rate_of(w[:, :1], dataset.fs, band=cfg.passband) for w in x0])
    return EvalWindows(x0, x1, gt, ids, dataset.fs)


def predict_rates(fields, x1s: np.ndarray, sampler_cfg: SamplerConfig, fs: float,
                  band=signals.DEFAULT_BAND, seed: int | None = None, jobs: int = 1):
    """Pulse rate per window from its ensemble; returns (rates, terminals)."""
    terminals, _ = ensemble_windows(x1s, fields, sampler_cfg, seed, jobs)
    rates = np.array([signals.pulse_rate_of(t, fs, band=band) for t in terminals])
    return rates, terminals


def measurement_rates(x1s: np.ndarray, fs: float, band=signals.DEFAULT_BAND) -> np.ndarray:
    """Baseline: the spectral peak of the raw measurement windows."""
    return np.array([signals.pulse_rate_of(w, fs, band=band) for w in x1s])


def train_and_score(train_ds: SynthDataset, windows: EvalWindows, cfg: TrainConfig,
                    sampler_cfg: SamplerConfig, jobs: int = 1) -> dict:
    result = train(train_ds, cfg)
    ck = result.checkpoint()
    fields = NetworkFields.from_checkpoint(ck)
    rates, _ = predict_rates(fields, windows.x1, sampler_cfg, windows.fs, cfg.passband,
                             sampler_cfg.seed, jobs)
    metrics = uq.pulse_metrics(rates, windows.gt_bpm)
    return {"metrics": metrics, "rates": rates, "result": result}


def run_ablation(train_ds: SynthDataset, windows: EvalWindows, base: TrainConfig,
                 sampler_cfg: SamplerConfig, lambdas: Sequence[float], deltas: Sequence[float],
                 seeds: Iterable[int] = (0,), jobs: int = 1, progress=None) -> list[dict]:
    """MAE for every (lambda, delta) cell, averaged over training seeds."""
    seeds = list(seeds)
    rows = []
    for lam in lambdas:
        for delta in deltas:
            maes = []
            for sd in seeds:
                cfg = replace(base, lambda_rcl=float(lam), delta_shift=float(delta), seed=int(sd))
                maes.append(train_and_score(train_ds, windows, cfg, sampler_cfg, jobs)["metrics"]["mae"])
            row = {"lambda": float(lam), "delta": float(delta), "mae_bpm": float(np.mean(maes))}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["lambda", "delta", "mae_bpm"])
        for r in rows:
            wr.writerow([repr(r["lambda"]), repr(r["delta"]), repr(r["mae_bpm"])])
