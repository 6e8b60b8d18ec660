"""Checkpoints: ``NRC1`` magic, u32 header length, JSON header, little-endian f64 blobs.

The header records each array's name, shape, trainable flag and byte offset,
plus free-form metadata (configs, RNG state).  Restoring requires a model of
the same structure; names and shapes must match exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import atomic_write_bytes
from .errors import ContractError
from .nn import Module

MAGIC = b"NRC1"


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(path, model: Module, meta: dict | None = None, rng: np.random.Generator | None = None) -> None:
    arrays = []
    entries = []
    offset = 0
    for name, p in model.named_parameters():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "trainable": p.trainable, "offset": offset})
        arrays.append(blob)
        offset += len(blob)
    header = {"params": entries, "meta": meta or {}}
    if rng is not None:
        header["rng"] = rng_state(rng)
    hbytes = json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")
    atomic_write_bytes(Path(path), MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(arrays))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """``(header, arrays)`` from a checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    base = 8 + hlen
    arrays = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 8 * count > len(raw):
            raise ContractError(f"{path}: truncated data for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(e["shape"]).copy()
    return header, arrays


def load_into(model: Module, path) -> dict:
    """Copy checkpoint arrays and trainable flags into ``model``; returns the header."""
    header, arrays = read_checkpoint(path)
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise ContractError(f"checkpoint structure differs: missing {missing}, unexpected {extra}")
    flags = {e["name"]: e["trainable"] for e in header["params"]}
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise ContractError(f"shape mismatch for {name}: model {p.shape}, checkpoint {arrays[name].shape}")
        p.data[...] = arrays[name]
        p.trainable = flags[name]
    return header
