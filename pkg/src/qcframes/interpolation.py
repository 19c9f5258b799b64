"""Multilinear interpolation of gridded fields at scattered points.

Coordinates outside the grid are clamped (constant extrapolation); the
caller can ask for a mask of clamped points.
"""

from __future__ import annotations

import numpy as np

from .grid import Grid

__all__ = ["interpolate", "interpolate_many"]


def _locate(grid: Grid, points: np.ndarray):
    """Cell indices, fractions and a clamped-mask for points (N, n)."""
    n = grid.n
    lo = np.empty(points.shape, dtype=np.int64)
    fr = np.empty(points.shape)
    clamped = np.zeros(points.shape[0], dtype=bool)
    for k in range(n):
        g = (points[:, k] - grid.origin[k]) / grid.spacing
        clamped |= (g < -1e-9) | (g > grid.dims[k] - 1 + 1e-9)
        g = np.clip(g, 0.0, grid.dims[k] - 1)
        idx = np.minimum(g.astype(np.int64), grid.dims[k] - 2)
        lo[:, k] = idx
        fr[:, k] = g - idx
    return lo, fr, clamped


def interpolate(values: np.ndarray, grid: Grid, points: np.ndarray,
                return_clamped: bool = False):
    """Multilinear interpolation of one node array at points (N, n)."""
    out, clamped = interpolate_many(values[np.newaxis], grid, points, return_clamped=True)
    if return_clamped:
        return out[0], clamped
    return out[0]


def interpolate_many(values: np.ndarray, grid: Grid, points: np.ndarray,
                     return_clamped: bool = False):
    """Interpolate a stack of node arrays (C, *dims) at points (N, n)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lo, fr, clamped = _locate(grid, points)
    n = grid.n
    C = values.shape[0]
    flat = values.reshape(C, -1)
    strides = np.array([int(np.prod(grid.dims[k + 1:])) for k in range(n)], dtype=np.int64)
    base = lo @ strides
    out = np.zeros((C, points.shape[0]))
    for corner in range(2**n):
        w = np.ones(points.shape[0])
        off = 0
        for k in range(n):
            if corner >> k & 1:
                w = w * fr[:, k]
                off += strides[k]
            else:
                w = w * (1.0 - fr[:, k])
        out += w * flat[:, base + off]
    if return_clamped:
        return out, clamped
    return out
