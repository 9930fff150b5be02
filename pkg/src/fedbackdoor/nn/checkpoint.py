"""Versioned ``.npz`` checkpoints.

Layout (format version 1):

* ``__format__``: int64 scalar, the format version
* ``__arch__``: the architecture as UTF-8 JSON bytes (uint8 array)
* ``p/<layer>/<name>``: every learnable parameter array, float64
* ``bn/mean/<k>``, ``bn/var/<k>``: running stats of the k-th batch-norm layer
* ``bn/momentum``: float64 scalar

A save/load round trip is bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .model import BnStats, ModelArch, ModelState

FORMAT_VERSION = 1


def save_checkpoint(state: ModelState, path) -> None:
    arrays = {
        "__format__": np.array(FORMAT_VERSION, dtype=np.int64),
        "__arch__": np.frombuffer(json.dumps(state.arch.to_dict(), sort_keys=True).encode(), dtype=np.uint8),
        "bn/momentum": np.array(state.bn_stats.momentum, dtype=np.float64),
    }
    for i, params in enumerate(state.params):
        for name, value in params.items():
            arrays[f"p/{i}/{name}"] = value
    for k, (m, v) in enumerate(zip(state.bn_stats.means, state.bn_stats.vars)):
        arrays[f"bn/mean/{k}"] = m
        arrays[f"bn/var/{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> ModelState:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["__format__"]) if "__format__" in z else -1
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {version}, expected {FORMAT_VERSION}")
        arch = ModelArch.from_dict(json.loads(z["__arch__"].tobytes().decode()))
        params = [dict() for _ in arch.layers]
        for key in z.files:
            if key.startswith("p/"):
                _, i, name = key.split("/")
                params[int(i)][name] = z[key].copy()
        nbn = len(arch.bn_layers)
        stats = BnStats(tuple(z[f"bn/mean/{k}"].copy() for k in range(nbn)),
                        tuple(z[f"bn/var/{k}"].copy() for k in range(nbn)),
                        float(z["bn/momentum"]))
    return ModelState(arch, tuple(params), stats)
