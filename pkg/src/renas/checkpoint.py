"""Deterministic single-file checkpoints.

File layout (all integers little-endian)::

    b"RENAS-CKPT\\n"                    magic, 11 bytes
    uint64                             header length H
    H bytes                            UTF-8 JSON header, keys sorted
    payload                            float64 arrays back to back, in header order

The header holds ``version``, ``config``, ``step``, ``rng_state``,
``cursors``, ``adam_step_count``, ``normalization``, ``payload_sha256`` and
``arrays`` (a list of ``{"name", "shape", "offset"}`` in declared order:
weights, gammas, alpha, SGD velocities, Adam moments).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .config import SearchConfig

MAGIC = b"RENAS-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: SearchConfig
    step: int
    arrays: dict  # name -> float64 ndarray, insertion order is file order
    rng_state: dict = field(default_factory=dict)
    cursors: dict = field(default_factory=dict)
    adam_step_count: int = 0
    normalization: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        payload = bytearray()
        manifest = []
        for name, arr in self.arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            manifest.append({"name": name, "shape": list(a.shape), "offset": len(payload)})
            payload += a.tobytes()
        header: dict[str, Any] = {
            "version": VERSION,
            "config": self.config.to_dict(),
            "step": self.step,
            "rng_state": self.rng_state,
            "cursors": self.cursors,
            "adam_step_count": self.adam_step_count,
            "normalization": self.normalization,
            "arrays": manifest,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<Q", len(hb)) + hb + bytes(payload)

    @classmethod
    def from_bytes(cls, raw: bytes, name: str = "<checkpoint>") -> "Checkpoint":
        if not raw.startswith(MAGIC):
            raise CheckpointError(f"{name}: not a checkpoint (bad magic)")
        try:
            (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
            start = len(MAGIC) + 8
            header = json.loads(raw[start : start + hlen].decode())
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{name}: unreadable header ({exc})") from exc
        if header.get("version") != VERSION:
            raise CheckpointError(f"{name}: version {header.get('version')!r} unsupported (expected {VERSION})")
        payload = raw[start + hlen :]
        digest = hashlib.sha256(payload).hexdigest()
        if digest != header["payload_sha256"]:
            raise CheckpointError(f"{name}: payload hash {digest[:12]} does not match header {header['payload_sha256'][:12]}")
        arrays = {}
        for item in header["arrays"]:
            n = int(np.prod(item["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f8", count=n, offset=item["offset"])
            arrays[item["name"]] = arr.reshape(item["shape"]).astype(np.float64)
        return cls(
            config=SearchConfig.from_dict({**header["config"], "op_set": tuple(header["config"]["op_set"])}),
            step=header["step"],
            arrays=arrays,
            rng_state=header["rng_state"],
            cursors=header["cursors"],
            adam_step_count=header["adam_step_count"],
            normalization=header["normalization"],
        )

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def atomic_write(path: str, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    atomic_write(path, ckpt.to_bytes())
    return path


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read(), name=path)
