"""Versioned checkpoint container for forecaster models.

Layout: one JSON header line (sorted keys, compact separators) followed by
the raw little-endian float64 buffers of every tensor in header order. The
encoding is fully deterministic, so save -> load -> save reproduces the
original file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ParseError
from .model import Forecaster, ModelConfig

FORMAT_VERSION = 1


def _tensor_entries(model: Forecaster) -> list[tuple[str, np.ndarray]]:
    entries = [(name, p.data) for name, p in model.named_parameters()]
    entries.extend((f"blocks.{i}.mask", blk.mask.data)
                   for i, blk in enumerate(model.blocks))
    return entries


def save_checkpoint(path, model: Forecaster, meta: dict | None = None) -> None:
    entries = _tensor_entries(model)
    header = {
        "version": FORMAT_VERSION,
        "config": asdict(model.cfg),
        "pruned": model.pruned_layers(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in entries],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    with open(path, "wb") as f:
        f.write(blob)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Forecaster, dict]:
    path = Path(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid checkpoint header: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version "
                         f"{header.get('version')!r}")

    cfg = ModelConfig(**header["config"])
    model = Forecaster(cfg, seed=0)
    for i in header["pruned"]:
        model.blocks[i].remove_attention()

    offset = 0
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n_bytes = int(np.prod(shape)) * 8 if shape else 8
        chunk = payload[offset:offset + n_bytes]
        if len(chunk) != n_bytes:
            raise ParseError(f"{path}: truncated checkpoint payload at "
                             f"tensor {entry['name']!r}")
        state[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += n_bytes
    if offset != len(payload):
        raise ParseError(f"{path}: {len(payload) - offset} trailing bytes "
                         "after last tensor")
    model.load_state_dict(state)
    return model, header.get("meta", {})
