"""Foolsgold: down-weight clients whose update histories look alike."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..updates import DefenseVerdict

FLAG_THRESHOLD = 0.5
SIMILARITY_TOL = 1e-9


@dataclass
class FoolsgoldHistory:
    """Per-client running sum of every delta the client ever uploaded."""

    sums: dict = field(default_factory=dict)

    def add(self, updates) -> None:
        for u in updates:
            prev = self.sums.get(u.client_id)
            self.sums[u.client_id] = u.vector.copy() if prev is None else prev + u.vector

    def matrix(self, client_ids) -> np.ndarray:
        return np.stack([self.sums[c] for c in client_ids])


def foolsgold_weights(hist: np.ndarray) -> np.ndarray:
    """Per-row weight in [0, 1]; similar histories get weights near 0."""
    n = len(hist)
    norms = np.linalg.norm(hist, axis=1)
    live = norms > 0
    unit = np.zeros_like(hist)
    unit[live] = hist[live] / norms[live, None]
    cs = unit @ unit.T
    np.fill_diagonal(cs, 0.0)
    maxcs = cs.max(axis=1) if n > 1 else np.zeros(n)
    # pardoning: damp similarity towards clients that are themselves less suspicious
    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j] and maxcs[j] > 0:
                cs[i, j] *= maxcs[i] / maxcs[j]
    wv = 1.0 - (cs.max(axis=1) if n > 1 else np.zeros(n))
    wv = np.clip(wv, 0.0, 1.0)
    wv[wv < SIMILARITY_TOL] = 0.0  # rounding must not turn identical histories into distinct ones
    top = wv.max() if n else 0.0
    if top > 0:
        wv = wv / top
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = np.log(wv / (1.0 - wv)) + 0.5
    wv[np.isinf(wv) & (wv > 0)] = 1.0
    wv = np.clip(np.nan_to_num(wv, nan=0.0, neginf=0.0), 0.0, 1.0)
    wv[~live] = 1.0
    return wv


def defend_foolsgold(updates, history: FoolsgoldHistory) -> DefenseVerdict:
    """Weights from cosine similarity of cumulative histories; weight < 0.5 is flagged.

    ``history`` must already contain this round's deltas.
    """
    ids = [u.client_id for u in updates]
    missing = [c for c in ids if c not in history.sums]
    if missing:
        raise ValueError(f"no history for clients {missing}")
    w = foolsgold_weights(history.matrix(ids)) if ids else np.zeros(0)
    weights = {c: float(x) for c, x in zip(ids, w)}
    accepted = [c for c in ids if weights[c] >= FLAG_THRESHOLD]
    return DefenseVerdict.partition(updates, accepted, scores=dict(weights), weights=weights)
