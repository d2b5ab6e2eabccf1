"""IAPT checkpoint container.

Layout: ``b"IAPT"`` | u32 version | u64 manifest length | JSON manifest |
payload.  The manifest maps each tensor name to its dtype, shape and byte
offset into the little-endian payload; a ``meta`` object carries optimizer
step and configs.  Writing is canonical, so save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"IAPT"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64"}


class CheckpointError(ValueError):
    pass


def _to_numpy(t) -> np.ndarray:
    a = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    dt = np.dtype(a.dtype).newbyteorder("<")
    if dt not in _NAMES:
        raise CheckpointError(f"unsupported dtype {a.dtype}")
    # ascontiguousarray promotes 0-d arrays to 1-d; keep the original shape
    return np.ascontiguousarray(a, dtype=dt).reshape(a.shape)


def write_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    arrays = {name: _to_numpy(t) for name, t in sorted(tensors.items())}
    entries, offset = {}, 0
    for name, a in arrays.items():
        entries[name] = {"dtype": _NAMES[a.dtype], "shape": list(a.shape), "offset": offset}
        offset += a.nbytes
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True,
                          separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(manifest)) + manifest)
        for a in arrays.values():
            f.write(a.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a whole file; raises :class:`CheckpointError` before returning anything on damage."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an IAPT checkpoint")
    version, mlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if 16 + mlen > len(data):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16:16 + mlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    payload = memoryview(data)[16 + mlen:]
    tensors = {}
    for name, e in manifest["tensors"].items():
        dt = _DTYPES[e["dtype"]]
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        start = e["offset"]
        if start + n > len(payload):
            raise CheckpointError(f"{path}: truncated payload (tensor {name})")
        tensors[name] = np.frombuffer(payload[start:start + n], dtype=dt).reshape(e["shape"]).copy()
    return tensors, manifest.get("meta", {})


def model_tensors(model) -> dict:
    return {name: p for name, p in model.state_dict().items()}


def load_model_tensors(model, tensors: dict, names=None) -> None:
    """Copy named tensors into ``model``; every requested name must be present."""
    state = model.state_dict()
    wanted = list(state) if names is None else list(names)
    missing = [n for n in wanted if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing)}")
    for n in wanted:
        if tuple(tensors[n].shape) != tuple(state[n].shape):
            raise CheckpointError(f"shape mismatch for {n}: {tensors[n].shape} vs {tuple(state[n].shape)}")
    with torch.no_grad():
        for n in wanted:
            state[n].copy_(torch.from_numpy(tensors[n]).to(state[n].dtype))
