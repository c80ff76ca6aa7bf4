"""Versioned JSON checkpoints with an embedded payload hash."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ArgumentError, IntegrityError
from .adam import AdamState
from .network import Architecture, check_params

FORMAT_VERSION = 1


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    if d.get("dtype", "<f8") != "<f8":
        raise ValueError(f"unsupported array dtype {d['dtype']!r}")
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def _encode_params(params: dict[str, np.ndarray]) -> dict:
    return {k: encode_array(params[k]) for k in sorted(params)}


def _decode_params(d: dict) -> dict[str, np.ndarray]:
    return {k: decode_array(v) for k, v in d.items()}


def _encode_adam(state: AdamState) -> dict:
    return {
        "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
        "step": state.step, "m": _encode_params(state.m), "v": _encode_params(state.v),
    }


def _decode_adam(d: dict) -> AdamState:
    return AdamState(d["lr"], d["beta1"], d["beta2"], d["eps"], int(d["step"]),
                     _decode_params(d["m"]), _decode_params(d["v"]))


def canonical_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class Checkpoint:
    arch: Architecture
    flow: dict[str, np.ndarray]
    denoiser: dict[str, np.ndarray]
    flow_opt: AdamState | None = None
    denoiser_opt: AdamState | None = None
    step: int = 0
    config: dict = field(default_factory=dict)

    def payload(self) -> dict:
        out = {
            "format_version": FORMAT_VERSION,
            "architecture": self.arch.to_dict(),
            "step": self.step,
            "params": {"flow": _encode_params(self.flow), "denoiser": _encode_params(self.denoiser)},
            "optimizer": None,
            "config": self.config,
        }
        if self.flow_opt is not None and self.denoiser_opt is not None:
            out["optimizer"] = {"flow": _encode_adam(self.flow_opt),
                                "denoiser": _encode_adam(self.denoiser_opt)}
        return out


def dumps(ckpt: Checkpoint) -> bytes:
    payload = ckpt.payload()
    digest = hashlib.sha256(canonical_bytes(payload)).hexdigest()
    payload["payload_sha256"] = digest
    return json.dumps(payload, sort_keys=True, indent=1).encode("utf-8") + b"\n"


def save(ckpt: Checkpoint, path) -> str:
    """Write the checkpoint; returns the sha256 of the file bytes."""
    data = dumps(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def loads(data: bytes) -> Checkpoint:
    try:
        payload = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "payload_sha256" not in payload:
        raise IntegrityError("checkpoint has no payload hash")
    expected = payload.pop("payload_sha256")
    actual = hashlib.sha256(canonical_bytes(payload)).hexdigest()
    if actual != expected:
        raise IntegrityError(f"checkpoint hash mismatch: stored {expected[:12]}, computed {actual[:12]}")
    if payload.get("format_version") != FORMAT_VERSION:
        raise ArgumentError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    try:
        arch = Architecture.from_dict(payload["architecture"])
        flow = _decode_params(payload["params"]["flow"])
        den = _decode_params(payload["params"]["denoiser"])
    except (KeyError, ValueError, TypeError) as exc:
        raise IntegrityError(f"malformed checkpoint: {exc}") from exc
    check_params(flow, arch)
    check_params(den, arch)
    opt = payload.get("optimizer")
    fo = do = None
    if opt:
        fo, do = _decode_adam(opt["flow"]), _decode_adam(opt["denoiser"])
    return Checkpoint(arch, flow, den, fo, do, int(payload["step"]), payload.get("config", {}))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
