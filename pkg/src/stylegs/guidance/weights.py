"""Flat binary weight blobs with a JSON sidecar describing tensor layout."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError


def save_weights(module, path):
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json``."""
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for name, tensor in module.state_dict().items():
        arr = np.ascontiguousarray(tensor.detach().numpy(), dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "float64"})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps({"tensors": entries, "nbytes": offset}, indent=1))


def load_weights(module, path):
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable weight sidecar: {exc}") from exc
    blob = path.with_suffix(".bin").read_bytes()
    if len(blob) != meta.get("nbytes"):
        raise FormatError("weight blob size does not match its sidecar")
    state = {}
    for entry in meta["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise FormatError(f"weight blob lacks tensors: {sorted(missing)}")
    module.load_state_dict(state)
    return module
