"""Versioned JSON checkpoints for model parameters.

Arrays are stored as shape + flat float lists.  Python's float repr is
shortest-round-trip, and json both emits and parses it that way, so a
save/load cycle reproduces every double bit-for-bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .model import GVQDims, GVQParams, from_arrays

FORMAT_NAME = "fedcodebook-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, params: GVQParams, meta: dict | None = None):
    dims = params.dims
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dims": {"d": dims.d, "d_h": dims.d_h, "heads": dims.heads,
                 "tokens_per_head": dims.tokens_per_head, "d_e": dims.d_e},
        "params": {name: {"shape": list(t.shape),
                          "data": t.data.reshape(-1).tolist()}
                   for name, t in params.named()},
        "counters": params.counters.tolist(),
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_checkpoint(path) -> tuple[GVQParams, dict]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"checkpoint is not valid JSON: {exc}")
    if payload.get("format") != FORMAT_NAME:
        raise ValidationError(f"not a {FORMAT_NAME} file")
    if payload.get("version") != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint version {payload.get('version')!r}")
    dims = GVQDims(**payload["dims"])
    arrays = {}
    for name, entry in payload["params"].items():
        arrays[name] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
    counters = np.array(payload["counters"], dtype=np.int64)
    return from_arrays(dims, arrays, counters), payload.get("meta", {})
