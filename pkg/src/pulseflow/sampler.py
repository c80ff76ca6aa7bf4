"""Reverse-time Euler-Maruyama sampling from a measurement to pulse estimates."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields as dc_fields
from typing import Protocol, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, SamplerBlowup, SingularityError
from .interpolant import gamma, gamma_dot
from .vectorfield.checkpoint import Checkpoint
from .vectorfield.network import Architecture, check_params, net_forward

DRIFT_FORMS = ("consistent", "gamma_scaled")  # b = v + gamma' n  or  b = v - gamma' gamma n
VARIANTS = ("b", "forward", "backward")


@dataclass
class SamplerConfig:
    epsilon: float = 0.5
    steps: int = 500
    t_clamp: float = 1e-3
    n_realizations: int = 100
    seed: int = 0
    snapshot_times: tuple[float, ...] = ()
    drift_form: str = "consistent"
    chunk_size: int = 8

    def __post_init__(self):
        self.snapshot_times = tuple(float(v) for v in self.snapshot_times)
        self.validate()

    def validate(self) -> None:
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ConfigError("epsilon must be finite and >= 0")
        if self.steps < 2:
            raise ConfigError("steps must be >= 2")
        if not 0 < self.t_clamp < 0.1:
            raise ConfigError("t_clamp must lie in (0, 0.1)")
        if self.n_realizations < 1:
            raise ConfigError("n_realizations must be >= 1")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.drift_form not in DRIFT_FORMS:
            raise ConfigError(f"drift_form must be one of {DRIFT_FORMS}")
        if any(not 0 <= t <= 1 for t in self.snapshot_times):
            raise ConfigError("snapshot times must lie in [0, 1]")

    def time_grid(self) -> np.ndarray:
        """Interpolant times visited, from 1 - t_clamp down to t_clamp."""
        s = np.linspace(self.t_clamp, 1.0 - self.t_clamp, self.steps + 1)
        return 1.0 - s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snapshot_times"] = list(d["snapshot_times"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        unknown = set(d) - {f.name for f in dc_fields(cls)}
        if unknown:
            raise ConfigError(f"unknown sampler fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


class Fields(Protocol):
    def flow(self, t, x): ...

    def denoise(self, t, x): ...


class NetworkFields:
    """Learned flow and denoiser evaluated from parameter dictionaries."""

    def __init__(self, arch: Architecture, params_v: dict, params_n: dict):
        check_params(params_v, arch)
        check_params(params_n, arch)
        self.arch, self.params_v, self.params_n = arch, params_v, params_n

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "NetworkFields":
        return cls(ckpt.arch, ckpt.flow, ckpt.denoiser)

    def flow(self, t, x):
        return net_forward(self.params_v, t, x, self.arch)

    def denoise(self, t, x):
        return net_forward(self.params_n, t, x, self.arch)


class ZeroDenoiser:
    """Wraps fields so the denoiser output is identically zero."""

    def __init__(self, base: Fields):
        self.base = base

    def flow(self, t, x):
        return self.base.flow(t, x)

    def denoise(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


def drift(fields: Fields, t: float, x, epsilon: float, variant: str = "backward",
          form: str = "consistent", t_clamp: float = 1e-3) -> np.ndarray:
    """b, b_F = b + eps*s or b_B = b - eps*s at a single time ``t``."""
    if variant not in VARIANTS:
        raise ArgumentError(f"variant must be one of {VARIANTS}")
    if form not in DRIFT_FORMS:
        raise ArgumentError(f"form must be one of {DRIFT_FORMS}")
    tol = 1e-12
    if not t_clamp - tol <= t <= 1.0 - t_clamp + tol:
        raise SingularityError(f"t={t!r} outside [{t_clamp}, {1 - t_clamp}]")
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(fields.flow(t, x), dtype=np.float64)
    n = np.asarray(fields.denoise(t, x), dtype=np.float64)
    g, gd = float(gamma(t)), float(gamma_dot(t))
    b = v + gd * n if form == "consistent" else v - gd * g * n
    if variant == "b" or epsilon == 0:
        return b
    s = -n / g
    return b + epsilon * s if variant == "forward" else b - epsilon * s


@dataclass
class Trajectory:
    times: np.ndarray
    states: list[np.ndarray]
    terminal: np.ndarray
    snapshots: dict[float, np.ndarray] = field(default_factory=dict)


def snapshot_indices(grid: np.ndarray, times: Sequence[float]) -> dict[float, int]:
    """Nearest grid index for each requested t; the ends map to the clamp."""
    return {float(t): int(np.argmin(np.abs(grid - t))) for t in times}


def _integrate(x1: np.ndarray, fields: Fields, cfg: SamplerConfig, noise, keep_states: bool,
               row_offset: int | None = None):
    grid = cfg.time_grid()
    ds = (1.0 - 2.0 * cfg.t_clamp) / cfg.steps
    amp = np.sqrt(2.0 * cfg.epsilon)
    snaps = snapshot_indices(grid, cfg.snapshot_times)
    wanted = {}
    for t, i in snaps.items():
        wanted.setdefault(i, []).append(t)
    x = np.array(x1, dtype=np.float64, copy=True)
    states = [x.copy()] if keep_states else []
    out = {t: x.copy() for t in wanted.get(0, [])}
    for k in range(cfg.steps):
        b_back = drift(fields, float(grid[k]), x, cfg.epsilon, "backward", cfg.drift_form, cfg.t_clamp)
        x = x - b_back * ds + amp * noise(k, ds)
        if not np.all(np.isfinite(x)):
            real = None
            if row_offset is not None:
                bad = ~np.isfinite(x.reshape(x.shape[0], -1)).all(axis=1)
                real = row_offset + int(np.flatnonzero(bad)[0])
            raise SamplerBlowup(k + 1, float(grid[k + 1]), real)
        if keep_states:
            states.append(x.copy())
        for t in wanted.get(k + 1, []):
            out[t] = x.copy()
    return grid, states, x, out


def _as_array(x1) -> np.ndarray:
    return np.asarray(getattr(x1, "samples", x1), dtype=np.float64)


def reverse_sample(x1, fields: Fields, cfg: SamplerConfig, rng: np.random.Generator | None = None,
                   dW: np.ndarray | None = None, keep_states: bool = True) -> Trajectory:
    """Integrate the reverse SDE from ``x1`` (t = 1) towards t = 0.

    ``dW`` optionally supplies the Wiener increments, shape (steps, *x1.shape),
    already scaled by sqrt(ds); otherwise they are drawn from ``rng``.
    """
    x1 = _as_array(x1)
    if dW is not None:
        dW = np.asarray(dW, dtype=np.float64)
        if dW.shape != (cfg.steps, *x1.shape):
            raise ArgumentError(f"dW must have shape {(cfg.steps, *x1.shape)}, got {dW.shape}")
        noise = lambda k, ds: dW[k]  # noqa: E731
    else:
        if rng is None:
            raise ArgumentError("need rng or dW")
        noise = lambda k, ds: np.sqrt(ds) * rng.standard_normal(x1.shape)  # noqa: E731
    grid, states, x, snaps = _integrate(x1, fields, cfg, noise, keep_states)
    return Trajectory(grid, states, x, snaps)


def realization_rng(master_seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(k)])


@dataclass
class EnsembleResult:
    terminals: np.ndarray
    snapshots: dict[float, np.ndarray]
    master_seed: int

    @property
    def n(self) -> int:
        return self.terminals.shape[0]


def _run_rows(x1_rows: np.ndarray, seeds: list, fields: Fields, cfg: SamplerConfig, jobs: int):
    """Integrate each row with its own generator, in fixed-size chunks."""
    if jobs < 1:
        raise ArgumentError("jobs must be >= 1")
    n = len(seeds)
    starts = list(range(0, n, cfg.chunk_size))
    shape = x1_rows.shape[1:]

    def run(start: int):
        stop = min(start + cfg.chunk_size, n)
        rngs = [np.random.default_rng(seeds[i]) for i in range(start, stop)]
        noise = lambda k, ds: np.sqrt(ds) * np.stack([r.standard_normal(shape) for r in rngs])  # noqa: E731
        _, _, x, snaps = _integrate(x1_rows[start:stop], fields, cfg, noise, False, row_offset=start)
        return x, snaps

    if jobs == 1 or len(starts) == 1:
        parts = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, starts))
    terminals = np.concatenate([p[0] for p in parts])
    snaps = {t: np.concatenate([p[1][t] for p in parts]) for t in parts[0][1]}
    return terminals, snaps


def ensemble(x1, fields: Fields, cfg: SamplerConfig, master_seed: int | None = None,
             jobs: int = 1) -> EnsembleResult:
    """N independent reverse samples from the same ``x1``.

    Realization k draws its noise from ``realization_rng(master_seed, k)``.
    Realizations are batched in fixed chunks of ``cfg.chunk_size``; ``jobs``
    only decides how many chunks run at once, so outputs do not depend on it.
    """
    x1 = _as_array(x1)
    seed = cfg.seed if master_seed is None else int(master_seed)
    n = cfg.n_realizations
    rows = np.repeat(x1[None], n, axis=0)
    terminals, snaps = _run_rows(rows, [[seed, k] for k in range(n)], fields, cfg, jobs)
    return EnsembleResult(terminals, snaps, seed)


def ensemble_windows(x1s, fields: Fields, cfg: SamplerConfig, master_seed: int | None = None,
                     jobs: int = 1) -> tuple[np.ndarray, dict]:
    """Ensembles for a stack of W windows; returns (W, N, T, R) terminals.

    Window w, realization k is seeded by ``[master_seed, k, w]``.
    """
    x1s = np.asarray(x1s, dtype=np.float64)
    if x1s.ndim != 3:
        raise ArgumentError("x1s must be (W, T, R)")
    seed = cfg.seed if master_seed is None else int(master_seed)
    W, n = x1s.shape[0], cfg.n_realizations
    rows = np.repeat(x1s, n, axis=0)
    seeds = [[seed, k, w] for w in range(W) for k in range(n)]
    try:
        terminals, snaps = _run_rows(rows, seeds, fields, cfg, jobs)
    except SamplerBlowup as exc:
        if exc.realization is not None:
            exc.realization = exc.realization % n
        raise
    shape = (W, n, *x1s.shape[1:])
    return terminals.reshape(shape), {t: v.reshape(shape) for t, v in snaps.items()}


def wiener_increments(rng: np.random.Generator, steps: int, shape, ds: float) -> np.ndarray:
    return np.sqrt(ds) * rng.standard_normal((steps, *shape))


def coarsen_increments(dW: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` fine increments (same Brownian path)."""
    if dW.shape[0] % factor:
        raise ArgumentError("fine step count must be a multiple of factor")
    return dW.reshape(dW.shape[0] // factor, factor, *dW.shape[1:]).sum(axis=1)
