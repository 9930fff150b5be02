"""Hot numeric kernels with a numba JIT path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``FEDBACKDOOR_NO_NUMBA`` is unset (or ``0``). Both paths accumulate
in the same order, so ``im2col``/``col2im`` are bit-identical across them;
``pairwise_sq_dists`` agrees to floating-point rounding.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("FEDBACKDOOR_NO_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError("numba disabled by FEDBACKDOOR_NO_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


# ---------------------------------------------------------------- numpy path

def _im2col_np(x, kernel, stride):
    n, c, h, w = x.shape
    oh = conv_output_size(h, kernel, stride)
    ow = conv_output_size(w, kernel, stride)
    cols = np.empty((n, oh, ow, c, kernel, kernel), dtype=x.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            patch = x[:, :, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride]
            cols[:, :, :, :, ki, kj] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n, oh, ow, c * kernel * kernel)


def _col2im_np(cols, x_shape, kernel, stride):
    n, c, h, w = x_shape
    oh = conv_output_size(h, kernel, stride)
    ow = conv_output_size(w, kernel, stride)
    cols = cols.reshape(n, oh, ow, c, kernel, kernel)
    out = np.zeros(x_shape, dtype=cols.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            out[:, :, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride] += (
                cols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    return out


def _pairwise_sq_dists_np(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, kernel, stride):
        n, c, h, w = x.shape
        oh = (h - kernel) // stride + 1
        ow = (w - kernel) // stride + 1
        cols = np.empty((n, oh, ow, c * kernel * kernel), dtype=x.dtype)
        for b in range(n):
            for i in range(oh):
                for j in range(ow):
                    col = 0
                    for ch in range(c):
                        for ki in range(kernel):
                            for kj in range(kernel):
                                cols[b, i, j, col] = x[b, ch, i * stride + ki, j * stride + kj]
                                col += 1
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, kernel, stride):
        oh = (h - kernel) // stride + 1
        ow = (w - kernel) // stride + 1
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        # same (ki, kj) outer order as the numpy path keeps sums bit-identical
        for ki in range(kernel):
            for kj in range(kernel):
                for b in range(n):
                    for i in range(oh):
                        for j in range(ow):
                            for ch in range(c):
                                col = (ch * kernel + ki) * kernel + kj
                                out[b, ch, i * stride + ki, j * stride + kj] += cols[b, i, j, col]
        return out

    @njit(cache=True)
    def _pairwise_sq_dists_nb(x):
        n, d = x.shape
        out = np.zeros((n, n), dtype=x.dtype)
        for i in range(n):
            for j in range(i + 1, n):
                s = 0.0
                for k in range(d):
                    t = x[i, k] - x[j, k]
                    s += t * t
                out[i, j] = s
                out[j, i] = s
        return out


# ---------------------------------------------------------------- dispatch

def im2col(x: np.ndarray, kernel: int, stride: int, use_numba: bool | None = None) -> np.ndarray:
    """Unfold ``(N, C, H, W)`` into ``(N, OH, OW, C*k*k)`` patch rows (no padding)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAVE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA):
        return _im2col_nb(x, kernel, stride)
    return _im2col_np(x, kernel, stride)


def col2im(cols: np.ndarray, x_shape: tuple, kernel: int, stride: int,
           use_numba: bool | None = None) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back to image layout."""
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if HAVE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA):
        n, c, h, w = x_shape
        return _col2im_nb(cols, n, c, h, w, kernel, stride)
    return _col2im_np(cols, x_shape, kernel, stride)


def pairwise_sq_dists(x: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
    """Squared Euclidean distance matrix between the rows of ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAVE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA):
        return _pairwise_sq_dists_nb(x)
    return _pairwise_sq_dists_np(x)
