"""Accuracy, scoring-rule and calibration metrics over reconstruction ensembles."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from . import signals
from .errors import ArgumentError, DegenerateCorrelationError, NumericError

SIGMA_FLOOR = 1e-6
DEFAULT_LEVELS = tuple(np.round(np.arange(1, 20) * 0.05, 2))
DEFAULT_TAUS = DEFAULT_LEVELS
SPECTRUM_MAX_BPM = 200.0
_LOG_2PI = np.log(2.0 * np.pi)


def _arrays(*xs):
    out = [np.asarray(x, dtype=np.float64) for x in xs]
    for a in out:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite input")
    try:
        return np.broadcast_arrays(*out)
    except ValueError as exc:
        raise ArgumentError(f"shape mismatch: {[a.shape for a in out]}") from exc


def _floor(sigma: np.ndarray, floor: float) -> np.ndarray:
    if np.any(sigma < 0):
        raise ArgumentError("sigma must be nonnegative")
    return np.maximum(sigma, floor)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    ac, bc = a - a.mean(), b - b.mean()
    den = np.sqrt((ac @ ac) * (bc @ bc))
    if den == 0:
        raise DegenerateCorrelationError()
    return float(ac @ bc / den)


def pulse_metrics(pred, gt, strict: bool = False) -> dict:
    """MAE, RMSE and PCC of pulse rates.

    A constant input leaves PCC undefined: it is reported as NaN with
    ``pcc_degenerate`` set, or raised when ``strict``.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape or pred.size == 0:
        raise ArgumentError("pred and gt must be equal-length and nonempty")
    err = pred - gt
    out = {"mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(np.mean(err ** 2))),
           "pcc": float("nan"), "pcc_degenerate": False}
    try:
        out["pcc"] = pearson(pred, gt)
    except DegenerateCorrelationError as exc:
        out["pcc_degenerate"] = True
        if strict:
            raise DegenerateCorrelationError(str(exc), metrics=out) from exc
    return out


def gaussian_nll(y, mu, sigma, floor: float = SIGMA_FLOOR) -> float:
    y, mu, sigma = _arrays(y, mu, sigma)
    s = _floor(sigma, floor)
    return float(np.mean(0.5 * _LOG_2PI + np.log(s) + 0.5 * ((y - mu) / s) ** 2))


def crps_gaussian(y, mu, sigma, floor: float = SIGMA_FLOOR) -> float:
    y, mu, sigma = _arrays(y, mu, sigma)
    s = _floor(sigma, floor)
    z = (y - mu) / s
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return float(np.mean(s * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - 1.0 / np.sqrt(np.pi))))


def sharpness(sigma) -> float:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ArgumentError("sigma must be nonnegative")
    return float(np.mean(sigma ** 2))


def _check_taus(taus) -> np.ndarray:
    taus = np.asarray(taus, dtype=np.float64).reshape(-1)
    if taus.size == 0 or np.any(taus <= 0) or np.any(taus >= 1):
        raise ArgumentError("quantile levels must lie in (0, 1)")
    return taus


def gaussian_quantiles(mu, sigma, taus, floor: float = SIGMA_FLOOR) -> np.ndarray:
    """Array shaped (len(taus), *mu.shape)."""
    taus = _check_taus(taus)
    mu, sigma = _arrays(mu, sigma)
    s = _floor(sigma, floor)
    return mu[None] + ndtri(taus).reshape(-1, *([1] * mu.ndim)) * s[None]


def check_score(y, quantile_preds, taus) -> float:
    """Mean pinball loss; ``quantile_preds`` has one leading row per tau."""
    taus = _check_taus(taus)
    q = np.asarray(quantile_preds, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if q.shape[0] != taus.size:
        raise ArgumentError("one quantile prediction row per tau required")
    tt = taus.reshape(-1, *([1] * (q.ndim - 1)))
    d = y[None] - q
    return float(np.mean(np.where(d >= 0, d * tt, -d * (1.0 - tt))))


def interval_score(y, lower, upper, alpha: float) -> float:
    y, lower, upper = _arrays(y, lower, upper)
    if not 0 < alpha < 1:
        raise ArgumentError("alpha must lie in (0, 1)")
    if np.any(lower > upper):
        raise ArgumentError("lower bound exceeds upper bound")
    below = (2.0 / alpha) * (lower - y) * (y < lower)
    above = (2.0 / alpha) * (y - upper) * (y > upper)
    return float(np.mean((upper - lower) + below + above))


@dataclass
class CalibrationCurve:
    levels: np.ndarray
    observed: np.ndarray
    miscalibration_area: float

    def rows(self):
        return list(zip(self.levels.tolist(), self.observed.tolist()))


def calibration_curve(y, mu, sigma, levels: Sequence[float] = DEFAULT_LEVELS,
                      floor: float = SIGMA_FLOOR) -> CalibrationCurve:
    """Coverage of central Gaussian intervals at each nominal level."""
    y, mu, sigma = _arrays(y, mu, sigma)
    if y.size == 0:
        raise ArgumentError("no data")
    levels = _check_taus(levels)
    s = _floor(sigma, floor).reshape(-1)
    dev = np.abs(y - mu).reshape(-1)
    half = ndtri(0.5 + levels / 2.0)
    observed = np.array([np.mean(dev <= h * s) for h in half])
    return CalibrationCurve(levels, observed, float(np.mean(np.abs(observed - levels))))


def normalize_spectrum(p, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    m = p.max(axis=axis, keepdims=True)
    return np.divide(p, m, out=np.zeros_like(p), where=m > 0)


def spectrum_metrics(pred_spec, gt_spec, normalize: bool = True) -> dict:
    pred = np.asarray(getattr(pred_spec, "power", pred_spec), dtype=np.float64)
    gt = np.asarray(getattr(gt_spec, "power", gt_spec), dtype=np.float64)
    if pred.shape != gt.shape:
        raise ArgumentError(f"bin grids differ: {pred.shape} vs {gt.shape}")
    for a, b in ((pred_spec, gt_spec),):
        fa, fb = getattr(a, "bin_freqs_bpm", None), getattr(b, "bin_freqs_bpm", None)
        if fa is not None and fb is not None and not np.array_equal(fa, fb):
            raise ArgumentError("bin frequencies differ")
    if normalize:
        pred, gt = normalize_spectrum(pred.reshape(-1)), normalize_spectrum(gt.reshape(-1))
    err = pred.reshape(-1) - gt.reshape(-1)
    g = gt.reshape(-1)
    ss_tot = float(np.sum((g - g.mean()) ** 2))
    r2 = 1.0 - float(err @ err) / ss_tot if ss_tot > 0 else float("nan")
    try:
        pcc = pearson(pred, gt)
    except DegenerateCorrelationError:
        pcc = float("nan")
    return {"mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(np.mean(err ** 2))),
            "r2": r2, "pcc": pcc, "normalized": normalize}


def bland_altman(pred, gt) -> dict:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape or pred.size < 2:
        raise ArgumentError("need equal-length inputs with at least two entries")
    d = pred - gt
    mean, sd = float(d.mean()), float(d.std(ddof=1))
    return {"mean_diff": mean, "sd_diff": sd, "loa_lo": mean - 1.96 * sd, "loa_hi": mean + 1.96 * sd}


# --------------------------------------------------------------- reports


def summed_spectrum(samples: np.ndarray, fs: float, pad_factor: int = 10,
                    max_bpm: float = SPECTRUM_MAX_BPM) -> tuple[np.ndarray, np.ndarray]:
    """Max-normalized channel-summed spectra of (..., T, R) windows.

    Returns ``(freqs, power)`` with power shaped (..., L) over bins <= max_bpm.
    """
    samples = np.asarray(samples, dtype=np.float64)
    lead = samples.shape[:-2]
    flat = samples.reshape(-1, *samples.shape[-2:])
    rows, freqs = [], None
    for w in flat:
        spec = signals.power_spectrum(signals.SignalWindow(w, fs), pad_factor)
        keep = spec.bin_freqs_bpm <= max_bpm
        freqs = spec.bin_freqs_bpm[keep]
        rows.append(spec.total()[keep])
    power = normalize_spectrum(np.array(rows))
    return freqs, power.reshape(*lead, -1)


@dataclass
class UncertaintyReport:
    freqs_bpm: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    quantiles: np.ndarray
    taus: np.ndarray
    nll: float
    crps: float
    sharpness: float
    check_score: float
    interval_score: float
    calibration: CalibrationCurve
    degenerate: bool = False
    alpha: float = 0.05
    extra: dict = field(default_factory=dict)

    @property
    def miscalibration_area(self) -> float:
        return self.calibration.miscalibration_area

    def scalars(self) -> dict:
        return {"nll": self.nll, "crps": self.crps, "sharpness": self.sharpness,
                "check_score": self.check_score, "interval_score": self.interval_score,
                "miscalibration_area": self.miscalibration_area}

    def to_dict(self) -> dict:
        return {
            "scalars": self.scalars(),
            "degenerate": self.degenerate,
            "alpha": self.alpha,
            "sigma_floor": SIGMA_FLOOR,
            "spectra_normalization": "max",
            "calibration": [{"level": lv, "observed": ob} for lv, ob in self.calibration.rows()],
            "extra": self.extra,
        }


def uncertainty_report(ensemble_power, gt_power, freqs=None, levels=DEFAULT_LEVELS,
                       taus=DEFAULT_TAUS, alpha: float = 0.05) -> UncertaintyReport:
    """Per-bin ensemble statistics against a ground-truth spectrum.

    ``ensemble_power`` is (N, ..., L); ``gt_power`` matches the trailing shape.
    """
    ens = np.asarray(ensemble_power, dtype=np.float64)
    y = np.asarray(gt_power, dtype=np.float64)
    if ens.shape[1:] != y.shape:
        raise ArgumentError(f"ensemble bins {ens.shape[1:]} do not match truth {y.shape}")
    if ens.shape[0] < 2:
        raise ArgumentError("need at least two realizations for a spread estimate")
    mu = ens.mean(axis=0)
    sd = ens.std(axis=0, ddof=1)
    degenerate = bool(np.all(sd < SIGMA_FLOOR))
    taus = _check_taus(taus)
    q = gaussian_quantiles(mu, sd, taus)
    half = ndtri(1.0 - alpha / 2.0) * np.maximum(sd, SIGMA_FLOOR)
    return UncertaintyReport(
        freqs_bpm=np.asarray(freqs) if freqs is not None else np.arange(y.shape[-1], dtype=float),
        mean=mu, std=sd, quantiles=q, taus=taus,
        nll=gaussian_nll(y, mu, sd), crps=crps_gaussian(y, mu, sd), sharpness=sharpness(sd),
        check_score=check_score(y, q, taus), interval_score=interval_score(y, mu - half, mu + half, alpha),
        calibration=calibration_curve(y, mu, sd, levels), degenerate=degenerate, alpha=alpha)


def write_calibration_csv(path, curve: CalibrationCurve) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["level", "observed"])
        for lv, ob in curve.rows():
            wr.writerow([repr(lv), repr(ob)])


def write_bland_altman_csv(path, pred, gt) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["mean_bpm", "diff_bpm"])
        for p, g in zip(np.asarray(pred, float), np.asarray(gt, float)):
            wr.writerow([repr(float((p + g) / 2)), repr(float(p - g))])


def report_json(obj) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(type(o))
    return json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n"
