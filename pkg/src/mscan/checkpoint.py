"""Single-file model checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"MSCANCK\\0"
    4 bytes   uint32 format version (currently 1)
    4 bytes   uint32 header length n
    n bytes   UTF-8 JSON header: {"kind", "config", "tensors": [{"name", "shape", "dtype", "offset", "count"}]}
    ...       concatenated little-endian float32 payload, in header order

Every entry of the module's ``state_dict`` (parameters and buffers) is stored
as float32 and cast back to the live tensor's dtype on load.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"MSCANCK\0"
VERSION = 1


def save_checkpoint(path, module: torch.nn.Module, kind: str, config: dict) -> Path:
    path = Path(path)
    tensors, chunks, offset = [], [], 0
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4").ravel()
        tensors.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size * 4
    header = json.dumps({"kind": kind, "config": config, "tensors": tensors}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (header, {name: float32 array}) without building a module."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    version, n = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + n].decode())
        tensors = header["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from None
    payload = raw[16 + n:]
    arrays = {}
    for t in tensors:
        start = t["offset"]
        if start + 4 * t["count"] > len(payload):
            raise CheckpointError(f"{path}: payload truncated at tensor {t['name']!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=t["count"], offset=start)
        arrays[t["name"]] = arr.reshape(t["shape"])
    return header, arrays


def load_into(module: torch.nn.Module, path, kind: str | None = None) -> dict:
    """Load a checkpoint into ``module`` in place; returns the header."""
    header, arrays = read_checkpoint(path)
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, got {header['kind']!r}")
    state = module.state_dict()
    if set(state) != set(arrays):
        raise CheckpointError(f"parameter names differ from the {header['kind']} model")
    module.load_state_dict(
        {k: torch.from_numpy(arrays[k].copy()).to(state[k].dtype).reshape(state[k].shape) for k in state}
    )
    return header


def parameter_hash(module: torch.nn.Module) -> str:
    """SHA-256 over every state_dict tensor, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
