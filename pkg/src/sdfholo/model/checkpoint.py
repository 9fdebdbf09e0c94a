"""Single-file checkpoints: magic, version, JSON header, raw little-endian float64 payload."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointVersionError, CorruptFileError
from .network import ModelConfig, SDFHolo

MAGIC = b"SDFHOLO\0"
VERSION = 1


def save_checkpoint(model: SDFHolo, path, extra: dict | None = None):
    table, offset, blobs = [], 0, []
    for name, p in model.named_parameters():
        data = np.asarray(p.data, dtype="<f8")
        table.append({"name": name, "shape": list(p.data.shape), "offset": offset, "count": int(data.size)})
        offset += data.size
        blobs.append(data.tobytes(order="C"))
    header = json.dumps({"config": model.config.to_dict(), "params": table, "extra": extra or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path):
    """Returns (config dict, {name: array}, extra)."""
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CorruptFileError(f"{path}: not a model checkpoint")
    if len(raw) < len(MAGIC) + 8:
        raise CorruptFileError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header") from exc
    payload = raw[start + hlen:]
    total = sum(p["count"] for p in header["params"])
    if len(payload) != total * 8:
        raise CorruptFileError(f"{path}: payload holds {len(payload)} bytes, header promises {total * 8}")
    flat = np.frombuffer(payload, dtype="<f8")
    params = {p["name"]: flat[p["offset"]:p["offset"] + p["count"]].reshape(tuple(p["shape"])).astype(np.float64)
              for p in header["params"]}
    return header["config"], params, header.get("extra", {})


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, extra)."""
    cfg, params, extra = read_checkpoint(path)
    model = SDFHolo(ModelConfig.from_dict(cfg), seed=0)
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing, unexpected = sorted(set(own) - set(params)), sorted(set(params) - set(own))
        raise CorruptFileError(f"{path}: parameter table mismatch (missing {missing[:3]}, unexpected {unexpected[:3]})")
    for name, p in own.items():
        if p.data.shape != params[name].shape:
            raise CorruptFileError(f"{path}: {name} has shape {params[name].shape}, expected {p.data.shape}")
        p.data = params[name].copy()
    return model, extra
