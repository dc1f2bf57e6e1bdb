"""Model checkpoint files.

A checkpoint is a JSON document::

    {"format": "ttnlab-checkpoint", "version": 1,
     "arch": "tiny_convnet", "num_classes": 10, "dtype": "float32",
     "tensors": {"<layer>.<name>": {"shape": [...], "data": "<base64 little-endian>"}},
     "alpha": [[...], ...] | null, "meta": {...}}

Tensor payloads are raw bytes, so a save/load round trip is lossless.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from ..norm import AlphaVector
from .model import ARCH_TINY_CONVNET, Model, tiny_convnet

FORMAT = "ttnlab-checkpoint"
VERSION = 1


class ArchitectureMismatch(ValueError):
    """The checkpoint describes a network this build cannot instantiate."""


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {"shape": list(a.shape), "data": base64.b64encode(a.astype(a.dtype.newbyteorder("<")).tobytes()).decode()}


def _decode(d: dict, dtype) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype).reshape(d["shape"])


def save_checkpoint(path, model: Model, alpha: AlphaVector | None = None, meta: dict | None = None) -> None:
    dtype = np.dtype(model.dtype)
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "arch": model.arch,
        "num_classes": model.num_classes,
        "dtype": dtype.name,
        "tensors": {k: _encode(v.astype(dtype)) for k, v in model.state().items()},
        "alpha": None if alpha is None else [[float(a) for a in layer] for layer in alpha.values],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> tuple[Model, AlphaVector | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    if doc.get("arch") != ARCH_TINY_CONVNET:
        raise ArchitectureMismatch(f"{path}: unsupported architecture {doc.get('arch')!r}")
    dtype = np.dtype(doc["dtype"])
    model = tiny_convnet(doc["num_classes"], seed=0, dtype=dtype)
    tensors = {k: _decode(v, dtype) for k, v in doc["tensors"].items()}
    expected = set(model.state())
    if set(tensors) != expected:
        raise ArchitectureMismatch(f"{path}: tensor names do not match architecture {doc['arch']!r}")
    for key, value in tensors.items():
        i, name = key.split(".")
        layer = model.layers[int(i)]
        if getattr(layer, name).shape != value.shape:
            raise ArchitectureMismatch(f"{path}: {key} has shape {value.shape}, "
                                       f"expected {getattr(layer, name).shape}")
        setattr(layer, name, value.copy())
    alpha = None if doc.get("alpha") is None else AlphaVector(doc["alpha"])
    return model, alpha, doc.get("meta", {})
