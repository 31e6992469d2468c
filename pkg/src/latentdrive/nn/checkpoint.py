"""Versioned checkpoint container.

A checkpoint is an ``.npz`` archive: one little-endian float64 array per
parameter path plus a ``__meta__`` entry holding UTF-8 JSON with the format
version, the network specs and any caller metadata.
"""

from __future__ import annotations

import json
import os

import numpy as np
import torch

from ..errors import CheckpointError
from .autodiff import ParameterSet
from .networks import NetworkSpec

FORMAT_VERSION = 1
META_KEY = "__meta__"


def save_checkpoint(path, params: ParameterSet, specs: dict, meta: dict | None = None):
    """Write ``params`` with ``specs`` (name -> NetworkSpec) atomically to ``path``."""
    arrays = {k: p.detach().cpu().numpy().astype("<f8") for k, p in params.items()}
    header = {
        "format_version": FORMAT_VERSION,
        "specs": {name: spec.to_dict() for name, spec in specs.items()},
        "meta": meta or {},
        "shapes": {k: list(a.shape) for k, a in arrays.items()},
    }
    arrays[META_KEY] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    path = str(path)
    if not path.endswith(".npz"):
        path += ".npz"
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint(path):
    """Return (header, arrays) without building any network."""
    path = str(path)
    if not os.path.exists(path) and os.path.exists(path + ".npz"):
        path += ".npz"
    try:
        with np.load(path) as z:
            header = json.loads(bytes(z[META_KEY]).decode())
            arrays = {k: z[k] for k in z.files if k != META_KEY}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')}")
    header["specs"] = {k: NetworkSpec.from_dict(v) for k, v in header["specs"].items()}
    return header, arrays


def load_into(params: ParameterSet, arrays: dict):
    """Copy ``arrays`` into ``params`` after checking names and shapes."""
    diffs = []
    for k in sorted(set(params) | set(arrays)):
        if k not in arrays:
            diffs.append(f"{k}: missing from checkpoint")
        elif k not in params:
            diffs.append(f"{k}: not in network")
        elif tuple(arrays[k].shape) != tuple(params[k].shape):
            diffs.append(f"{k}: checkpoint {tuple(arrays[k].shape)} vs network {tuple(params[k].shape)}")
    if diffs:
        raise CheckpointError("checkpoint does not match network:\n  " + "\n  ".join(diffs))
    with torch.no_grad():
        for k, p in params.items():
            p.copy_(torch.from_numpy(np.ascontiguousarray(arrays[k], dtype="<f8")))
