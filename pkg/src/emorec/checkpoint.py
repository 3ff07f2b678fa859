"""Checkpoint files: a key=value text header, then parameter tensor blobs.

Layout: a magic line, ``key=value`` lines describing how to rebuild the
model, a ``---`` separator line, then one tensor blob (u32 rank, u32
extents, little-endian float32 data) per parameter in the model's
declaration order.
"""

from __future__ import annotations

import io

from .autodiff import read_tensor_blob, write_tensor_blob
from .errors import ConfigError

MAGIC = "emorec-checkpoint v1"
_SEPARATOR = b"---\n"


def save_checkpoint(path, meta, model):
    named = model.named_parameters()
    lines = [MAGIC]
    meta = dict(meta)
    meta["param_count"] = len(named)
    for key, value in meta.items():
        key = str(key)
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ConfigError(f"checkpoint meta key/value may not contain '=' or newline: {key!r}")
        lines.append(f"{key}={value}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_SEPARATOR)
        for _, param in named:
            write_tensor_blob(fh, param.data)


def load_checkpoint(path):
    """Returns (meta dict of strings, list of float32 arrays)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    cut = blob.find(_SEPARATOR)
    if cut < 0:
        raise ConfigError(f"{path}: not a checkpoint file (missing separator)")
    header_lines = blob[:cut].decode("utf-8").splitlines()
    if not header_lines or header_lines[0] != MAGIC:
        raise ConfigError(f"{path}: bad checkpoint magic")
    meta = {}
    for line in header_lines[1:]:
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        meta[key] = value
    body = io.BytesIO(blob[cut + len(_SEPARATOR):])
    count = int(meta.get("param_count", 0))
    arrays = [read_tensor_blob(body) for _ in range(count)]
    return meta, arrays


def load_into_model(model, arrays):
    """Copy checkpoint arrays into a freshly built model of the same shape."""
    named = model.named_parameters()
    if len(named) != len(arrays):
        raise ConfigError(
            f"checkpoint has {len(arrays)} tensors, model expects {len(named)}"
        )
    for (name, param), arr in zip(named, arrays):
        if param.data.shape != arr.shape:
            raise ConfigError(
                f"parameter {name!r} shape {param.data.shape} != checkpoint {arr.shape}"
            )
        param.data = arr.astype(param.data.dtype)
    return model
