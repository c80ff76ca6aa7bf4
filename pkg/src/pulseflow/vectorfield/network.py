"""Compact time-conditioned 1-D convolutional vector field.

Layout (channel-last, ``x`` is (B, T, R)):

    h = conv_in(x) + time_mlp(embed(t))          # time enters as a bias
    h = h + conv2(silu(conv1(silu(h))))          # repeated ``blocks`` times
    y = conv_out(silu(h))                        # zero-initialised

The same class backs both the flow network and the denoiser; each owns an
independent parameter dict.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ArchitectureError, ArgumentError
from . import tape as ad


@dataclass(frozen=True)
class Architecture:
    in_channels: int
    hidden: int = 32
    blocks: int = 4
    kernel: int = 5
    time_dim: int = 32
    max_freq: float = 50.0

    def __post_init__(self):
        if self.in_channels < 1 or self.hidden < 1 or self.blocks < 0:
            raise ArchitectureError(f"invalid architecture {self}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ArchitectureError("kernel width must be odd")
        if self.time_dim % 2:
            raise ArchitectureError("time_dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)

    def shapes(self) -> dict[str, tuple]:
        k, c, r, e = self.kernel, self.hidden, self.in_channels, self.time_dim
        out = {
            "in.w": (k, r, c), "in.b": (c,),
            "time.w1": (e, c), "time.b1": (c,),
            "time.w2": (c, c), "time.b2": (c,),
        }
        for i in range(self.blocks):
            out[f"block{i}.w1"] = (k, c, c)
            out[f"block{i}.b1"] = (c,)
            out[f"block{i}.w2"] = (k, c, c)
            out[f"block{i}.b2"] = (c,)
        out["out.w"] = (k, c, r)
        out["out.b"] = (r,)
        return out

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes().values()))


def init_params(arch: Architecture, rng: np.random.Generator,
                zero_final: bool = True) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform init; biases zero, output layer zero by default."""
    params = {}
    for name, shape in arch.shapes().items():
        if name.split(".")[1].startswith("b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    if zero_final:
        params["out.w"] = np.zeros_like(params["out.w"])
    return params


def time_embedding(t, arch: Architecture) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = arch.time_dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(arch.max_freq), half))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def check_params(params: dict[str, np.ndarray], arch: Architecture) -> None:
    shapes = arch.shapes()
    missing = set(shapes) - set(params)
    if missing:
        raise ArchitectureError(f"missing parameters: {sorted(missing)}")
    for name, shape in shapes.items():
        if tuple(np.shape(params[name])) != shape:
            raise ArchitectureError(f"{name}: expected {shape}, got {np.shape(params[name])}")


def _as_batch(t, x, arch: Architecture):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != arch.in_channels:
        raise ArchitectureError(f"input shape {x.shape} incompatible with {arch.in_channels} channels")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ArgumentError("t must lie in [0, 1]")
    return t, x, squeeze


def build(tape: ad.Tape, p: dict[str, ad.Var], t, x, arch: Architecture) -> ad.Var:
    """Record the forward pass on ``tape``; ``p`` maps names to leaves."""
    t, x, _ = _as_batch(t, x, arch)
    emb = tape.constant(time_embedding(t, arch))
    temb = ad.silu(emb @ p["time.w1"] + p["time.b1"]) @ p["time.w2"] + p["time.b2"]
    h = ad.conv1d(tape.constant(x), p["in.w"]) + p["in.b"]
    h = h + temb.reshape(x.shape[0], 1, arch.hidden)
    for i in range(arch.blocks):
        u = ad.conv1d(ad.silu(h), p[f"block{i}.w1"]) + p[f"block{i}.b1"]
        u = ad.conv1d(ad.silu(u), p[f"block{i}.w2"]) + p[f"block{i}.b2"]
        h = h + u
    return ad.conv1d(ad.silu(h), p["out.w"]) + p["out.b"]


def net_forward(params: dict[str, np.ndarray], t, x, arch: Architecture) -> np.ndarray:
    """Evaluate the network; ``x`` is (T, R) or (B, T, R), ``t`` scalar or (B,)."""
    check_params(params, arch)
    _, xb, squeeze = _as_batch(t, x, arch)
    tape = ad.Tape(check_finite=False)
    p = {k: tape.constant(v) for k, v in params.items()}
    out = build(tape, p, t, xb, arch).value
    return out[0] if squeeze else out
