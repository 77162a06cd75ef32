"""Checkpoint I/O: a JSON manifest plus a flat little-endian float64 blob.

Layout on disk (``<stem>.json`` + ``<stem>.bin``)::

    {"format": "fusion-ckpt", "version": 1,
     "arrays": [{"name": ..., "shape": [...], "offset": <float index>}, ...],
     "hyperparameters": {...}}

Arrays are stored back to back in manifest order.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT = "fusion-ckpt"
VERSION = 1


def save_arrays(stem: str | os.PathLike, arrays: dict[str, np.ndarray], hyperparameters: dict) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.reshape(-1))
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "total": int(offset),
        "arrays": entries,
        "hyperparameters": hyperparameters,
    }
    stem.with_suffix(".bin").write_bytes(blob.astype("<f8").tobytes())
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_arrays(stem: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise ValueError(f"{stem}: not a {FORMAT} v{VERSION} checkpoint")
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    if blob.size != manifest["total"]:
        raise ValueError(f"{stem}: blob holds {blob.size} values, manifest expects {manifest['total']}")
    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = blob[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return arrays, manifest["hyperparameters"]
