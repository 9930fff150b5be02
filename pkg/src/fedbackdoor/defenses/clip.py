"""Fixed-bound l2 norm clipping."""

from __future__ import annotations

import numpy as np

from ..updates import ClientUpdate


def clip_vector(v: np.ndarray, bound: float) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v * (bound / norm) if norm > bound else v


def norm_clip(updates, bound: float) -> list[ClientUpdate]:
    """Rescale every delta whose l2 norm exceeds ``bound`` onto the ball of that radius."""
    if not bound > 0:
        raise ValueError("clip bound must be positive")
    return [u.with_vector(clip_vector(u.vector, bound)) for u in updates]
