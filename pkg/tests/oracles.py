"""Independent reference computations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np

from fedbackdoor.nn import model as nn


def loss_of(state, x, y) -> float:
    logits, _ = nn.forward(state, x, "train")
    return nn.cross_entropy(logits, y)


def fd_gradients(state, x, y, step: float = 1e-5) -> list:
    """Central finite differences of the mean cross-entropy for every parameter entry."""
    grads = []
    for i, p in enumerate(state.params):
        g = {}
        for name, value in p.items():
            out = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                losses = []
                for sign in (1.0, -1.0):
                    params = [dict(q) for q in state.params]
                    bumped = value.copy()
                    bumped[idx] += sign * step
                    params[i][name] = bumped
                    losses.append(loss_of(state.with_params(params), x, y))
                out[idx] = (losses[0] - losses[1]) / (2 * step)
            g[name] = out
        grads.append(g)
    return grads


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    # floor: gradients that vanish analytically (bias before BN) compare absolutely
    scale = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def brute_force_multikrum(vectors: np.ndarray, f: int, m: int) -> list:
    """Iterated Krum by direct enumeration of neighbour subsets."""
    remaining = list(range(len(vectors)))
    chosen = []
    for _ in range(m):
        k = len(vectors) - f - 1
        best, best_score = None, math.inf
        for i in remaining:
            others = [j for j in remaining if j != i]
            score = min(sum(float(np.sum((vectors[i] - vectors[j]) ** 2)) for j in subset)
                        for subset in itertools.combinations(others, min(k, len(others))))
            if score < best_score:
                best, best_score = i, score
        chosen.append(best)
        remaining.remove(best)
    return chosen


def bn_train_reference(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    """Per-feature normalization computed one column at a time."""
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        col = x[:, j]
        mu = sum(col) / len(col)
        var = sum((c - mu) ** 2 for c in col) / len(col)
        out[:, j] = gamma[j] * (col - mu) / math.sqrt(var + eps) + beta[j]
    return out
