"""Portable weight files: a JSON index plus a little-endian float64 blob.

``<stem>.json`` holds ``{"format": ..., "version": 1, "seed": ..., "meta": {...},
"tensors": {name: {"shape": [...], "offset": bytes}}}``; ``<stem>.bin`` holds
the tensors back to back in index order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "lagrangian-da-weights"
VERSION = 1


def save_weights(stem, arrays: dict[str, np.ndarray], seed: int | None = None, meta: dict | None = None) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    chunks = []
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        index[name] = {"shape": list(a.shape), "offset": offset}
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {"format": FORMAT, "version": VERSION, "seed": seed, "meta": meta or {}, "tensors": index}
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True))
    return stem


def load_weights(stem) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise ValueError(f"unsupported weights file {stem}")
    blob = stem.with_suffix(".bin").read_bytes()
    out = {}
    for name, ent in header["tensors"].items():
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=ent["offset"]).reshape(shape).copy()
    return out, header
