"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"FOPOCKPT"
    8       4     uint32 format version (1)
    12      4     uint32 header length H
    16      H     UTF-8 JSON header
    16+H    8*d   float64 theta
    ...     8*d   float64 theta_old (present iff header["has_old"])

The JSON header always carries ``d``, ``feature_map``, ``game`` and
``rng_state`` (the numpy bit-generator state dict, or null), plus the policy
spec, the optimizer step counter and free-form ``meta``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .paramcore import SoftmaxPolicy

MAGIC = b"FOPOCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    policy: SoftmaxPolicy
    theta: np.ndarray
    theta_old: np.ndarray | None = None
    step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.meta.get("label", "")


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    theta = np.ascontiguousarray(ckpt.theta, dtype="<f8")
    header = {
        "d": int(len(theta)),
        "feature_map": ckpt.policy.feature_map,
        "game": ckpt.policy.game,
        "rng_state": ckpt.rng_state,
        "policy": ckpt.policy.spec(),
        "step": int(ckpt.step),
        "has_old": ckpt.theta_old is not None,
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True, default=_jsonable).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(theta.tobytes())
        if ckpt.theta_old is not None:
            fh.write(np.ascontiguousarray(ckpt.theta_old, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    d = header["d"]
    off = 16 + hlen
    theta = np.frombuffer(raw, dtype="<f8", count=d, offset=off).astype(float)
    theta_old = None
    if header["has_old"]:
        theta_old = np.frombuffer(raw, dtype="<f8", count=d, offset=off + 8 * d).astype(float)
    policy = SoftmaxPolicy.from_spec(header["policy"])
    if policy.dim != d:
        raise ValueError(f"{path}: header d={d} disagrees with policy dim {policy.dim}")
    return Checkpoint(policy, theta, theta_old, header["step"], header["rng_state"], header["meta"])


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj)}")
