"""Flow / denoiser / residual-correlation losses and the training loop."""
from __future__ import annotations

import copy
import csv
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import signals
from .errors import ArgumentError, ConfigError, DegenerateCorrelationError, NumericError, TrainingDivergence
from .interpolant import gamma, sample_times
from .synth import SynthDataset
from .vectorfield import tape as ad
from .vectorfield.adam import AdamState, adam_step
from .vectorfield.checkpoint import Checkpoint
from .vectorfield.network import Architecture, build, init_params

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    lambda_rcl: float = 0.1
    delta_shift: float = 9.0
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-3
    seed: int = 0
    window_length: int = 250
    stride: int = 10
    max_steps: int | None = None
    val_fraction: float = 0.1
    val_every: int = 10
    val_batch_size: int = 32
    t_min: float = 1e-3
    rcl_mode: str = "residual"
    hidden: int = 32
    blocks: int = 4
    kernel: int = 5
    time_dim: int = 32
    passband: tuple[float, float] = signals.DEFAULT_BAND
    taps: int = 5
    bandpass: bool = True

    def __post_init__(self):
        self.passband = tuple(float(v) for v in self.passband)
        self.validate()

    def validate(self) -> None:
        if not np.isfinite(self.lambda_rcl) or self.lambda_rcl < 0:
            raise ConfigError("lambda_rcl must be finite and >= 0")
        if self.delta_shift < 0:
            raise ConfigError("delta_shift must be >= 0")
        for name in ("batch_size", "epochs", "window_length", "stride", "val_every", "val_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not 0 < self.t_min < 0.5:
            raise ConfigError("t_min must lie in (0, 0.5)")
        if self.rcl_mode not in ("residual", "flow"):
            raise ConfigError("rcl_mode must be 'residual' or 'flow'")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")

    def architecture(self, n_regions: int) -> Architecture:
        return Architecture(n_regions, self.hidden, self.blocks, self.kernel, self.time_dim)

    def delta_samples(self, fs: float) -> int:
        return int(round(self.delta_shift * fs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passband"] = list(d["passband"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------- RCL


def rcl_loss(p, q) -> float:
    """One minus the Pearson correlation of the flattened inputs.

    Raises when both inputs are constant.  When exactly one is constant the
    correlation is taken as 0, giving a loss of 1.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape or p.size < 2:
        raise ArgumentError("rcl_loss needs equal-length inputs of length >= 2")
    pc, qc = p - p.mean(), q - q.mean()
    vp, vq = float(pc @ pc), float(qc @ qc)
    if vp == 0 and vq == 0:
        raise DegenerateCorrelationError("both residuals are constant")
    if vp == 0 or vq == 0:
        return 1.0
    return 1.0 - float(pc @ qc) / np.sqrt(vp * vq)


def rcl_batch(p: ad.Var, q: ad.Var) -> ad.Var:
    """Mean RCL over rows of (B, D) tape variables.

    Rows where both vectors are exactly zero contribute 0; rows with one
    constant vector contribute 1 with no gradient.
    """
    pv, qv = p.value, q.value
    pc = p - p.mean(axis=1, keepdims=True)
    qc = q - q.mean(axis=1, keepdims=True)
    cov = (pc * qc).sum(axis=1)
    prod = ad.square(pc).sum(axis=1) * ad.square(qc).sum(axis=1)
    ok = (prod.value > 0).astype(np.float64)
    both_zero = (np.all(pv == 0, axis=1) & np.all(qv == 0, axis=1)).astype(np.float64)
    corr = cov / ad.sqrt(prod + (1.0 - ok)) * ok
    return (1.0 - corr - both_zero).mean()


# ------------------------------------------------------------ data prep


@dataclass
class Track:
    subject_id: str
    x0: np.ndarray
    x1: np.ndarray
    fs: float


def preprocess_track(x: np.ndarray, fs: float, cfg: TrainConfig) -> np.ndarray:
    if not cfg.bandpass:
        return np.asarray(x, dtype=np.float64)
    w = signals.SignalWindow(x, fs)
    return signals.fir_bandpass(w, cfg.passband[0], cfg.passband[1], cfg.taps).samples


def prepare_tracks(dataset: SynthDataset, cfg: TrainConfig) -> list[Track]:
    out = []
    for s in dataset.subjects:
        x0, x1 = s.paired()
        out.append(Track(s.subject_id, preprocess_track(x0, dataset.fs, cfg),
                         preprocess_track(x1, dataset.fs, cfg), dataset.fs))
    return out


def window_pair(track: Track, start: int, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Standardized (x0, x1) window starting at ``start``."""
    sl = slice(start, start + length)
    return signals.standardize(track.x0[sl]), signals.standardize(track.x1[sl])


def overlap_fraction(delta: int, length: int) -> float:
    """Fraction of samples shared by a window and its copy shifted by ``delta``."""
    if length < 1 or delta < 0:
        raise ArgumentError("need length >= 1 and delta >= 0")
    return max(0, length - delta) / length


def valid_origins(track: Track, length: int, delta: int, stride: int = 1) -> np.ndarray:
    n = track.x0.shape[0]
    if n - length < delta:
        return np.empty(0, dtype=int)
    return np.arange(delta, n - length + 1, stride)


def sample_shifted_pair(track: Track, origin: int, delta: int, length: int,
                        rng: np.random.Generator):
    """Pair at ``origin`` and its copy starting ``delta`` samples earlier.

    An origin without enough history (or running past the end) is replaced
    by one drawn uniformly from the valid range.  Returns
    ``((x0, x1), (x0_shift, x1_shift), origin_used)``.
    """
    n = track.x0.shape[0]
    if origin - delta < 0 or origin + length > n:
        valid = valid_origins(track, length, delta)
        if valid.size == 0:
            raise ArgumentError(f"{track.subject_id}: track too short for length {length} and shift {delta}")
        origin = int(rng.choice(valid))
    return window_pair(track, origin, length), window_pair(track, origin - delta, length), origin


@dataclass
class PairBatch:
    x0: np.ndarray
    x1: np.ndarray
    x0_shift: np.ndarray
    x1_shift: np.ndarray

    def __len__(self):
        return self.x0.shape[0]


def assemble_batch(tracks: Sequence[Track], picks, delta: int, length: int, rng) -> PairBatch:
    a0, a1, b0, b1 = [], [], [], []
    for ti, origin in picks:
        (x0, x1), (y0, y1), _ = sample_shifted_pair(tracks[ti], int(origin), delta, length, rng)
        a0.append(x0), a1.append(x1), b0.append(y0), b1.append(y1)
    return PairBatch(np.stack(a0), np.stack(a1), np.stack(b0), np.stack(b1))


# ----------------------------------------------------------------- losses


@dataclass
class LossResult:
    tape: ad.Tape
    total: ad.Var
    terms: dict[str, float]


def loss_terms(v_pred: ad.Var, n_pred: ad.Var, flow_target: np.ndarray, z: np.ndarray,
               lambda_rcl: float, rcl_mode: str = "residual") -> tuple[ad.Var, dict]:
    """Assemble the combined objective from stacked predictions.

    Predictions and targets are (2B, T, R): rows [0, B) are the windows at the
    origin and rows [B, 2B) their shifted partners.
    """
    flow_mse = ad.mean(ad.square(v_pred - flow_target))
    score_mse = ad.mean(ad.square(n_pred - z))
    total = flow_mse + score_mse
    two_b = v_pred.value.shape[0]
    b = two_b // 2
    vec = (flow_target - v_pred) if rcl_mode == "residual" else v_pred
    flat = vec.reshape(2, b, -1)
    rcl = rcl_batch(flat[0], flat[1]) if b > 0 and flat.value.shape[-1] > 1 else None
    if lambda_rcl and rcl is not None:
        total = total + lambda_rcl * rcl
    terms = {
        "flow_loss": float(flow_mse.value),
        "score_loss": float(score_mse.value),
        "rcl_loss": float(rcl.value) if rcl is not None else 0.0,
        "total": float(total.value),
    }
    return total, terms


def _leaves(tape: ad.Tape, params: dict, prefix: str) -> dict:
    return {k: tape.variable(v, name=f"{prefix}/{k}") for k, v in params.items()}


def loss_graph(tape: ad.Tape, pv: dict, pn: dict, batch: PairBatch, t: np.ndarray, z: np.ndarray,
               cfg: TrainConfig, arch: Architecture):
    """Record the combined loss on ``tape`` for leaf dictionaries ``pv`` and ``pn``."""
    tt = t[:, None, None]
    g = gamma(tt)
    xt = (1 - tt) * batch.x0 + tt * batch.x1 + g * z
    xs = (1 - tt) * batch.x0_shift + tt * batch.x1_shift + g * z
    x_in = np.concatenate([xt, xs])
    t_in = np.concatenate([t, t])
    target = np.concatenate([batch.x1 - batch.x0, batch.x1_shift - batch.x0_shift])
    v_pred = build(tape, pv, t_in, x_in, arch)
    n_pred = build(tape, pn, t_in, x_in, arch)
    return loss_terms(v_pred, n_pred, target, np.concatenate([z, z]), cfg.lambda_rcl, cfg.rcl_mode)


def total_loss(batch: PairBatch, params_v: dict, params_n: dict, cfg: TrainConfig,
               rng: np.random.Generator, arch: Architecture, t=None, z=None) -> LossResult:
    """Combined loss on one batch; pair members share t and z."""
    b = len(batch)
    t = sample_times(rng, b, cfg.t_min) if t is None else np.asarray(t, dtype=np.float64)
    z = rng.standard_normal(batch.x0.shape) if z is None else z
    tape = ad.Tape()
    pv, pn = _leaves(tape, params_v, "v"), _leaves(tape, params_n, "n")
    total, terms = loss_graph(tape, pv, pn, batch, t, z, cfg, arch)
    bad = [k for k, v in terms.items() if not np.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite loss term(s): {bad}")
    return LossResult(tape, total, terms)


# -------------------------------------------------------------- training


@dataclass
class TrainResult:
    arch: Architecture
    params_v: dict
    params_n: dict
    opt_v: AdamState
    opt_n: AdamState
    step: int
    curves: list[dict] = field(default_factory=list)
    best_step: int | None = None
    best_params_v: dict | None = None
    best_params_n: dict | None = None
    config: dict = field(default_factory=dict)

    def checkpoint(self, best: bool = True) -> Checkpoint:
        pv, pn = self.params_v, self.params_n
        if best and self.best_params_v is not None:
            pv, pn = self.best_params_v, self.best_params_n
        cfg = dict(self.config)
        cfg["best_step"] = self.best_step
        return Checkpoint(self.arch, pv, pn, self.opt_v, self.opt_n, self.step, cfg)


class Trainer:
    """Holds both parameter sets and their optimizers."""

    def __init__(self, arch: Architecture, cfg: TrainConfig, rng: np.random.Generator,
                 init: Checkpoint | None = None):
        self.arch, self.cfg = arch, cfg
        if init is None:
            self.params_v = init_params(arch, rng)
            self.params_n = init_params(arch, rng)
            self.opt_v = AdamState.for_params(self.params_v, lr=cfg.lr)
            self.opt_n = AdamState.for_params(self.params_n, lr=cfg.lr)
            self.step = 0
        else:
            if init.arch != arch:
                raise ArgumentError(f"checkpoint architecture {init.arch} != {arch}")
            self.params_v, self.params_n = dict(init.flow), dict(init.denoiser)
            self.opt_v = init.flow_opt or AdamState.for_params(self.params_v, lr=cfg.lr)
            self.opt_n = init.denoiser_opt or AdamState.for_params(self.params_n, lr=cfg.lr)
            self.step = init.step

    def train_step(self, batch: PairBatch, rng: np.random.Generator) -> dict:
        res = total_loss(batch, self.params_v, self.params_n, self.cfg, rng, self.arch)
        terms = res.terms
        if not np.isfinite(terms["total"]) or terms["total"] > DIVERGENCE_LIMIT:
            raise TrainingDivergence(self.step + 1, terms)
        grads = res.tape.backward(res.total)
        gv = {k[2:]: g for k, g in grads.items() if k.startswith("v/")}
        gn = {k[2:]: g for k, g in grads.items() if k.startswith("n/")}
        self.params_v, self.opt_v = adam_step(self.params_v, gv, self.opt_v)
        self.params_n, self.opt_n = adam_step(self.params_n, gn, self.opt_n)
        self.step += 1
        return terms

    def evaluate(self, batch: PairBatch, t: np.ndarray, z: np.ndarray) -> dict:
        return total_loss(batch, self.params_v, self.params_n, self.cfg, None, self.arch, t=t, z=z).terms


def split_subjects(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    if val_fraction > 0 and n > 1:
        n_val = max(n_val, 1)
    order = np.random.default_rng([seed, 7919]).permutation(n)
    val = sorted(int(i) for i in order[:n_val])
    train = sorted(int(i) for i in order[n_val:])
    return train, val


def train(dataset: SynthDataset, cfg: TrainConfig, resume: Checkpoint | None = None,
          progress=None) -> TrainResult:
    """Adam over shuffled shifted-pair batches; keeps the best-validation params."""
    if not dataset.subjects:
        raise ArgumentError("dataset is empty")
    tracks = prepare_tracks(dataset, cfg)
    delta = cfg.delta_samples(dataset.fs)
    L = cfg.window_length
    train_idx, val_idx = split_subjects(len(tracks), cfg.val_fraction, cfg.seed)
    origins = [(ti, int(o)) for ti in train_idx for o in valid_origins(tracks[ti], L, delta, cfg.stride)]
    if not origins:
        raise ArgumentError("no training windows: tracks too short for window length and shift")
    arch = cfg.architecture(tracks[0].x1.shape[1])

    start = 0 if resume is None else resume.step
    rng = np.random.default_rng([cfg.seed, start])
    trainer = Trainer(arch, cfg, rng, init=resume)

    val_batch = val_t = val_z = None
    vrng = np.random.default_rng([cfg.seed, 104729])
    val_origins = [(ti, int(o)) for ti in val_idx for o in valid_origins(tracks[ti], L, delta, cfg.stride)]
    if val_origins:
        k = min(cfg.val_batch_size, len(val_origins))
        picks = [val_origins[i] for i in sorted(vrng.choice(len(val_origins), size=k, replace=False))]
        val_batch = assemble_batch(tracks, picks, delta, L, vrng)
        val_t = sample_times(vrng, k, cfg.t_min)
        val_z = vrng.standard_normal(val_batch.x0.shape)

    curves: list[dict] = []
    best = (np.inf, None, None, None)
    steps_per_epoch = max(1, int(np.ceil(len(origins) / cfg.batch_size)))
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    done = 0
    while done < total_steps:
        perm = rng.permutation(len(origins))
        for s in range(steps_per_epoch):
            if done >= total_steps:
                break
            chunk = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            batch = assemble_batch(tracks, [origins[i] for i in chunk], delta, L, rng)
            terms = trainer.train_step(batch, rng)
            done += 1
            row = {"step": trainer.step, **terms, "val_total": None}
            if val_batch is not None and (done % cfg.val_every == 0 or done == total_steps):
                vt = trainer.evaluate(val_batch, val_t, val_z)["total"]
                row["val_total"] = vt
                if vt < best[0]:
                    best = (vt, trainer.step, dict(trainer.params_v), dict(trainer.params_n))
            curves.append(row)
            if progress is not None:
                progress(row)

    result = TrainResult(arch, trainer.params_v, trainer.params_n, trainer.opt_v, trainer.opt_n,
                         trainer.step, curves, config=cfg.to_dict())
    if best[1] is not None:
        result.best_step, result.best_params_v, result.best_params_n = best[1], best[2], best[3]
    else:
        result.best_step = trainer.step
    return result


def fit_pairs(x0: np.ndarray, x1: np.ndarray, cfg: TrainConfig, steps: int,
              arch: Architecture | None = None) -> TrainResult:
    """Train on plain (x0, x1) sample arrays shaped (N, T, R); no shift, no RCL."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape or x0.ndim != 3:
        raise ArgumentError("x0 and x1 must share shape (N, T, R)")
    arch = arch or cfg.architecture(x0.shape[2])
    local = copy.copy(cfg)
    local.lambda_rcl = 0.0
    rng = np.random.default_rng(cfg.seed)
    trainer = Trainer(arch, local, rng)
    curves = []
    for _ in range(steps):
        idx = rng.choice(x0.shape[0], size=cfg.batch_size, replace=False)
        half = cfg.batch_size // 2 or 1
        a, b = idx[:half], idx[half:2 * half] if cfg.batch_size > 1 else idx[:half]
        batch = PairBatch(x0[a], x1[a], x0[b], x1[b])
        terms = trainer.train_step(batch, rng)
        curves.append({"step": trainer.step, **terms, "val_total": None})
    return TrainResult(arch, trainer.params_v, trainer.params_n, trainer.opt_v, trainer.opt_n,
                       trainer.step, curves, best_step=trainer.step, config=local.to_dict())


CURVE_COLUMNS = ("step", "flow_loss", "score_loss", "rcl_loss", "total", "val_total")


def write_curves(path, curves: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CURVE_COLUMNS)
        for row in curves:
            wr.writerow(["" if row.get(c) is None else repr(row[c]) for c in CURVE_COLUMNS])
