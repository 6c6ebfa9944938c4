"""Bilinear resampling used for scale alignment, grid capping, and heatmaps.

Convention (half-pixel centers, no corner alignment): for an output index
``i`` along an axis of length ``n_out`` resampled from length ``n_in``,

    src = clamp((i + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo  = floor(src);  hi = min(lo + 1, n_in - 1);  t = src - lo
    out[i] = (1 - t) * in[lo] + t * in[hi]

Out-of-range source coordinates are clamped, which reproduces edge
replication. Interpolation weights along each axis sum to one, so the
operation commutes with affine maps of the values.
"""

import numpy as np

__all__ = ["resize_weights", "resize_plane", "resize_chw"]


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) bilinear resampling matrix for one axis."""
    if n_in < 1 or n_out < 1:
        raise ValueError("axis lengths must be >= 1")
    w = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    t = src - lo
    w[np.arange(n_out), lo] += 1.0 - t
    w[np.arange(n_out), hi] += t
    return w


def resize_plane(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a 2-D array to (out_h, out_w). Returns float64."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ValueError("expected a 2-D array")
    rh = resize_weights(plane.shape[0], out_h)
    rw = resize_weights(plane.shape[1], out_w)
    return rh @ plane @ rw.T


def resize_chw(stack: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a (C, H, W) stack channel-wise to (C, out_h, out_w)."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3:
        raise ValueError("expected a (C, H, W) array")
    rh = resize_weights(stack.shape[1], out_h)
    rw = resize_weights(stack.shape[2], out_w)
    # einsum keeps the reduction order fixed, so results are deterministic.
    return np.einsum("ij,cjk,lk->cil", rh, stack, rw, optimize=True)
