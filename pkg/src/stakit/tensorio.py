"""Flat key/value tensor container with a JSON shape manifest.

Layout (all integers little-endian):

    bytes 0..3   magic b"STK1"
    bytes 4..7   u32 manifest length in bytes
    manifest     UTF-8 JSON: {"version": 1, "meta": {...}, "tensors":
                 [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    data         contiguous little-endian tensor payloads

Tensors round-trip bit-exactly; ``meta`` carries small JSON-serializable
extras such as a run configuration.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CorruptFile, VersionMismatch

MAGIC = b"STK1"
VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(manifest).to_bytes(4, "little"))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load a container; returns ({name: array}, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    manifest_len = int.from_bytes(raw[4:8], "little")
    if len(raw) < 8 + manifest_len:
        raise CorruptFile(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[8 : 8 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable manifest") from exc
    if manifest.get("version") != VERSION:
        raise VersionMismatch(f"{path}: container version {manifest.get('version')} != {VERSION}")
    base = 8 + manifest_len
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise CorruptFile(f"{path}: truncated tensor {entry['name']!r}")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw[start:end], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.dtype(entry["dtype"]), copy=True)
    return tensors, manifest.get("meta", {})


def save_module(path: str | Path, module, meta: dict | None = None) -> None:
    """Save a torch module's parameters and buffers."""
    state = {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}
    save_tensors(path, state, meta)


def load_module(path: str | Path, module) -> dict:
    """Restore a torch module in place; returns the stored meta dict."""
    import torch

    tensors, meta = load_tensors(path)
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    module.load_state_dict(state)
    return meta
