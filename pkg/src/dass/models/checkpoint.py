"""Versioned container for named arrays with a readable JSON header.

Layout (little-endian)::

    8 bytes   magic  b"DASSARR\\0"
    4 bytes   uint32 format version
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header (indented, human readable)
    ...       raw array bytes, in header order, each at its recorded offset

The header holds ``kind``, ``config``, ``metadata`` and an ``arrays`` list of
``{name, dtype, shape, offset, nbytes}`` entries; offsets are relative to the
first byte after the header.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .attention import AttentionClassifier, AttnConfig
from .dass import DASS, ModelConfig

MAGIC = b"DASSARR\0"
FORMAT_VERSION = 1

MODEL_KINDS = {
    "dass": (DASS, ModelConfig),
    "attention": (AttentionClassifier, AttnConfig),
}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict, kind: str = "arrays", config: dict | None = None,
                metadata: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "kind": kind, "config": config or {},
                         "metadata": metadata or {}, "arrays": entries}, indent=1).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)[0]


def _read_header(fh, path):
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not an array container")
    version, size = struct.unpack("<II", fh.read(8))
    if version > FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is newer than {FORMAT_VERSION}")
    return json.loads(fh.read(size).decode()), len(MAGIC) + 8 + size


def load_arrays(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    with open(path, "rb") as fh:
        header, start = _read_header(fh, path)
    arrays = {}
    for e in header["arrays"]:
        lo = start + e["offset"]
        buf = data[lo: lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header


def model_kind(model) -> str:
    for kind, (cls, _) in MODEL_KINDS.items():
        if isinstance(model, cls):
            return kind
    raise CheckpointError(f"unsupported model type {type(model).__name__}")


def save_checkpoint(path, model, metadata: dict | None = None, optimizer=None) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    metadata = dict(metadata or {})
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        steps = {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p, {})
                name = names[id(p)]
                for key in ("exp_avg", "exp_avg_sq"):
                    if key in state:
                        arrays[f"optim/{name}/{key}"] = state[key].detach().cpu().numpy()
                if "step" in state:
                    steps[name] = float(state["step"])
        metadata["optimizer_steps"] = steps
    save_arrays(path, arrays, kind=model_kind(model), config=model.config.to_dict(), metadata=metadata)


def load_checkpoint(path, dtype=None):
    """Rebuild the model; returns ``(model, metadata, optimizer_arrays)``."""
    arrays, header = load_arrays(path)
    try:
        cls, cfg_cls = MODEL_KINDS[header["kind"]]
    except KeyError:
        raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}") from None
    cfg = cfg_cls.from_dict(_tuplify(header["config"]))
    model = cls(cfg)
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    float_dtypes = {t.dtype for t in state.values() if t.is_floating_point()}
    if len(float_dtypes) == 1:
        model = model.to(float_dtypes.pop())
    expected = model.state_dict()
    for name, t in expected.items():
        if name not in state:
            raise CheckpointError(f"{path}: missing array {name!r}")
        if tuple(state[name].shape) != tuple(t.shape):
            raise CheckpointError(f"{path}: {name!r} has shape {tuple(state[name].shape)}, "
                                  f"config implies {tuple(t.shape)}")
    model.load_state_dict(state)
    if dtype is not None:
        model = model.to(dtype)
    optim = {k: v for k, v in arrays.items() if k.startswith("optim/")}
    return model.eval(), header["metadata"], optim


def _tuplify(cfg: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
