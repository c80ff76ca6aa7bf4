"""Linear stochastic interpolant with gamma(t) = sqrt(2 t (1 - t))."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, SingularityError

T_MIN = 1e-3


def gamma(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ArgumentError("gamma is defined on [0, 1]")
    return np.sqrt(2.0 * t * (1.0 - t))


def gamma_dot(t):
    """d gamma / dt = (1 - 2t) / gamma(t); diverges at both endpoints."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0) or np.any(t >= 1):
        raise SingularityError("gamma_dot is singular at t in {0, 1}; clamp t first")
    return (1.0 - 2.0 * t) / np.sqrt(2.0 * t * (1.0 - t))


@dataclass
class InterpolantSample:
    t: float
    x_t: np.ndarray
    z: np.ndarray
    flow_target: np.ndarray


def interpolate(x0, x1, t, z):
    """(1 - t) x0 + t x1 + gamma(t) z with ``t`` broadcast over leading axes."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tt = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return (1.0 - tt) * x0 + tt * np.asarray(x1) + gamma(tt) * np.asarray(z)


def sample_point(x0, x1, t: float, rng: np.random.Generator | None = None,
                 z: np.ndarray | None = None) -> InterpolantSample:
    x0 = np.asarray(getattr(x0, "samples", x0), dtype=np.float64)
    x1 = np.asarray(getattr(x1, "samples", x1), dtype=np.float64)
    if x0.shape != x1.shape:
        raise ArgumentError(f"shape mismatch {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ArgumentError("t must lie in [0, 1]")
    if z is None:
        rng = np.random.default_rng() if rng is None else rng
        z = rng.standard_normal(x0.shape)
    x_t = interpolate(x0, x1, t, z)
    return InterpolantSample(float(t), x_t, z, x1 - x0)


def score_from_denoiser(n, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0) or np.any(t >= 1):
        raise SingularityError("score is singular at t in {0, 1}")
    return -np.asarray(n, dtype=np.float64) / gamma(t)


def sample_times(rng: np.random.Generator, size, t_min: float = T_MIN) -> np.ndarray:
    return rng.uniform(t_min, 1.0 - t_min, size=size)


class GaussianFields:
    """Exact flow and denoiser for independent scalar N(0,1) <-> N(0,1).

    Since Var(x_t) = 1 and Cov(x1 - x0, x_t) = 2t - 1, Cov(z, x_t) = gamma(t),
    conditioning gives v = (2t - 1) x and n = gamma(t) x; the score is -x.
    """

    def flow(self, t, x):
        return (2.0 * t - 1.0) * x

    def denoise(self, t, x):
        return gamma(t) * x
