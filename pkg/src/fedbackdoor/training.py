"""Mini-batch SGD loops shared by benign clients, attackers and the indicator."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .nn import model as nn

GradHook = Callable[[nn.ModelState, list], list]


def sample_batch(n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of one mini-batch, drawn without replacement.

    Batch-norm needs two samples, so a one-sample dataset is repeated.
    """
    if n <= 0:
        raise ValueError("cannot sample from an empty dataset")
    if n == 1:
        return np.zeros(2, dtype=np.int64)
    return rng.choice(n, min(batch, n), replace=False)


def l2_pull_grad(anchor: np.ndarray, lam: float) -> Callable[[nn.ModelState], list]:
    """Gradient of ``lam * ||w - anchor||_2``; zero at ``w == anchor``."""
    def grad(state: nn.ModelState) -> list:
        flat = nn.flatten(state)
        diff = flat.values - anchor
        norm = float(np.linalg.norm(diff))
        g = np.zeros_like(diff) if norm == 0.0 or lam == 0.0 else (lam / norm) * diff
        return list(nn.unflatten(g, state.arch))
    return grad


def l2_prox(anchor: np.ndarray, step: float) -> Callable[[nn.ModelState, nn.ModelState], nn.ModelState]:
    """Proximal map of ``step * ||w - anchor||_2`` as a ``post_step`` hook.

    Shrinks the deviation from ``anchor`` by ``step`` (to exactly zero when
    shorter), so a large penalty pins the iterate instead of oscillating.
    """
    def prox(_prev: nn.ModelState, new: nn.ModelState) -> nn.ModelState:
        if step == 0.0:
            return new
        dev = nn.flatten(new).values - anchor
        norm = float(np.linalg.norm(dev))
        shrink = max(0.0, 1.0 - step / norm) if norm > 0.0 else 0.0
        return nn.state_from_flat(anchor + shrink * dev, new)
    return prox


def local_sgd(state: nn.ModelState, x: np.ndarray, y: np.ndarray, iters: int, lr: float, batch: int,
              rng: np.random.Generator, extra_grad=None, grad_hook: GradHook | None = None,
              post_step: Callable[[nn.ModelState, nn.ModelState], nn.ModelState] | None = None) -> nn.ModelState:
    """Run ``iters`` SGD steps on ``(x, y)``.

    ``extra_grad(state)`` adds a regulariser gradient, ``grad_hook(state, grads)``
    may rewrite the gradient (masking), and ``post_step(prev, new)`` may
    project the new state.
    """
    if iters < 0:
        raise ValueError("iteration count must be non-negative")
    for _ in range(iters):
        idx = sample_batch(len(y), batch, rng)
        logits, cache = nn.forward(state, x[idx], "train")
        grads = nn.backprop(state, cache, nn.cross_entropy_grad(logits, y[idx]))
        if extra_grad is not None:
            grads = nn.add_grads(grads, extra_grad(state))
        if grad_hook is not None:
            grads = grad_hook(state, grads)
        new = nn.sgd_step(state, grads, lr)
        new = nn.ModelState(new.arch, new.params, cache.bn_stats)
        state = post_step(state, new) if post_step is not None else new
    return state
