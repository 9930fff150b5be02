"""Deepsight: flag updates whose final-layer energy is concentrated on few labels."""

from __future__ import annotations

import numpy as np
from sklearn.cluster import HDBSCAN

from .. import rng as rngmod
from ..nn import model as nn
from ..updates import DefenseVerdict, reconstruct, stack
from .clip import clip_vector
from .flame import cosine_distances

DEFAULT_PROBES = 256


def neups(update, arch: nn.ModelArch) -> np.ndarray:
    """Normalized per-output-neuron update energies of the classifier layer."""
    ci = arch.classifier_index
    params = nn.unflatten(update.vector, arch)[ci]
    energy = (np.abs(params["W"]).sum(axis=1) + np.abs(params["b"])) ** 2
    total = energy.sum()
    return energy / total if total > 0 else np.full(len(energy), 1.0 / len(energy))


def threshold_exceedings(neup: np.ndarray) -> int:
    return int(np.sum(neup >= neup.max() / 2.0))


def ddifs(update, global_state: nn.ModelState, probes: np.ndarray) -> np.ndarray:
    local = reconstruct(global_state, update)
    p_local = nn.softmax(nn.forward(local, probes, "eval")[0])
    p_global = nn.softmax(nn.forward(global_state, probes, "eval")[0])
    return np.mean(p_local / np.maximum(p_global, 1e-300), axis=0)


def defend_deepsight(updates, global_state: nn.ModelState, tau_c: float = 0.5, probes: int = DEFAULT_PROBES,
                     seed: int = 0) -> DefenseVerdict:
    """Cluster updates on (DDif, NEUP, cosine) features and reject clusters rich in low-TE updates.

    Accepted deltas are clipped to the median norm of all received deltas.
    """
    if not updates:
        raise ValueError("deepsight needs at least one update")
    arch = global_state.arch
    ids = [u.client_id for u in updates]
    n = len(updates)
    x = rngmod.stream(seed, "deepsight-probes").uniform(0.0, 1.0, (probes,) + arch.input_shape)
    neup = np.stack([neups(u, arch) for u in updates])
    te = np.array([threshold_exceedings(v) for v in neup])
    suspicious = te <= tau_c * np.median(te)
    deltas = stack(updates)
    feats = np.hstack([np.stack([ddifs(u, global_state, x) for u in updates]), neup, 1.0 - cosine_distances(deltas)])
    if n < 2 or np.allclose(feats, feats[0]):
        labels = np.zeros(n, dtype=int)
    else:
        labels = HDBSCAN(min_cluster_size=2, min_samples=1, allow_single_cluster=True).fit(feats).labels_.copy()
        # noise points form singleton clusters
        nxt = labels.max() + 1
        for i in np.flatnonzero(labels == -1):
            labels[i] = nxt
            nxt += 1
    accepted = []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        if suspicious[members].mean() < 1.0 / 3.0:
            accepted.extend(ids[i] for i in members)
    bound = float(np.median(np.linalg.norm(deltas, axis=1)))
    return DefenseVerdict.partition(updates, accepted, scores={c: int(t) for c, t in zip(ids, te)},
                                    post_processing={"clip_bound": bound, "noise_sigma": 0.0})
