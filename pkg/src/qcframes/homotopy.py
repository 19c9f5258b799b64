"""Averaged Poincare homotopy operator and friends.

The segment operator at a base point y turns an l-form into an
(l-1)-form by integrating the contracted form along straight segments:

    (K_y w)(x; v_1, ..)  =  int_0^1 t^(l-1) w(y + t(x-y); x-y, v_1, ..) dt.

Averaging y against a bump measure phi supported in the quarter ball
gives the operator T; its scaled and translated versions are the
conjugations by x -> r x and x -> x + x0, which amount to moving the
averaging centers to x0 + r * supp(phi).  Everything is evaluated by
Gauss-Legendre quadrature in t, a phi-weighted tensor quadrature in y,
and multilinear interpolation of the form at off-grid points.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .forms import FormField, Frame, exterior_derivative, multi_indices
from .grid import Ball, Grid

__all__ = [
    "Mollifier",
    "HomotopyConfig",
    "poincare_ky",
    "averaged_T",
    "potential_map",
    "chain_residual",
    "scale_pullback",
    "translation_pullback",
]

USE_NUMBA = _kernels.HAVE_NUMBA and not os.environ.get("QCFRAMES_PURE_NUMPY")


def _radial_profile(s: np.ndarray) -> np.ndarray:
    """Unnormalized bump exp(-1/(1-16 s^2)) for s < 1/4, else 0."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = s < 0.25
    q = 16.0 * s[inside] ** 2
    out[inside] = np.exp(-1.0 / (1.0 - q))
    return out


@dataclass(frozen=True)
class Mollifier:
    """Radial bump c * exp(-1/(1 - |4x|^2)) on B(1/4), unit mass."""

    n: int
    normalization: float = field(init=False)

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ValueError(f"mollifier dimension must be 2 or 3, got {self.n}")
        # reference radial quadrature: integrand is smooth with all
        # derivatives vanishing at s = 1/4, so Gauss converges fast
        x, w = np.polynomial.legendre.leggauss(400)
        s = 0.125 * (x + 1.0)
        ws = 0.125 * w
        sphere = 2.0 * np.pi if self.n == 2 else 4.0 * np.pi
        total = sphere * np.sum(ws * s ** (self.n - 1) * _radial_profile(s))
        object.__setattr__(self, "normalization", 1.0 / total)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return self.normalization * _radial_profile(np.linalg.norm(points, axis=-1))


@dataclass(frozen=True)
class HomotopyConfig:
    """Quadrature sizes for the homotopy operator.

    segment_order: Gauss-Legendre points on t in [0, 1] (>= 8).
    average_nodes_per_axis: tensor lattice over [-1/4, 1/4]^n whose
    in-ball nodes carry the phi weights (need >= 4^n inside B(1/4)).
    """

    segment_order: int = 16
    average_nodes_per_axis: int = 8

    def __post_init__(self):
        if self.segment_order < 8:
            raise ValueError(f"segment_order must be >= 8, got {self.segment_order}")

    def t_rule(self) -> tuple[np.ndarray, np.ndarray]:
        x, w = np.polynomial.legendre.leggauss(self.segment_order)
        return 0.5 * (x + 1.0), 0.5 * w

    def phi_rule(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Averaging offsets eta (P, n) in B(1/4) and weights summing to 1."""
        m = self.average_nodes_per_axis
        line = (np.arange(m) + 0.5) / m * 0.5 - 0.25
        eta = np.array(list(itertools.product(line, repeat=n)))
        w = Mollifier(n)(eta)
        keep = w > 0
        eta, w = eta[keep], w[keep]
        if eta.shape[0] < 4**n:
            raise ValueError(
                f"only {eta.shape[0]} averaging nodes inside B(1/4); need >= {4**n}"
            )
        return eta, w / np.sum(w)


DEFAULT_CONFIG = HomotopyConfig()


def _contraction_terms(n: int, ell: int):
    in_idx = multi_indices(n, ell)
    out_idx = multi_indices(n, ell - 1)
    cout, jax, cin, sign = [], [], [], []
    for ci, I in enumerate(in_idx):
        for kpos, j in enumerate(I):
            J = tuple(x for x in I if x != j)
            cout.append(out_idx.index(J))
            jax.append(j)
            cin.append(ci)
            sign.append((-1.0) ** kpos)
    return (np.array(cout, dtype=np.int64), np.array(jax, dtype=np.int64),
            np.array(cin, dtype=np.int64), np.array(sign), len(out_idx))


def _index_box(grid: Grid, region: Ball | None):
    """Node-index (start, stop) per axis covering the region, or the full grid."""
    if region is None:
        return tuple((0, d) for d in grid.dims)
    box = []
    for k in range(grid.n):
        lo = region.center[k] - region.radius
        hi = region.center[k] + region.radius
        a = int(np.floor((lo - grid.origin[k]) / grid.spacing))
        b = int(np.ceil((hi - grid.origin[k]) / grid.spacing)) + 1
        box.append((max(a, 0), min(b, grid.dims[k])))
    return tuple(box)


def _subgrid(grid: Grid, box) -> Grid:
    dims = tuple(b - a for a, b in box)
    origin = tuple(grid.origin[k] + box[k][0] * grid.spacing for k in range(grid.n))
    return Grid(dims, origin, grid.spacing)


def _apply_pairs(omega: FormField, centers: np.ndarray, weights: np.ndarray,
                 tvals: np.ndarray, box) -> FormField:
    grid = omega.grid
    n = grid.n
    terms = _contraction_terms(n, omega.degree)
    cout, jax, cin, sign, n_out = terms
    start = np.array([a for a, _ in box], dtype=np.int64)
    bshape = np.array([b - a for a, b in box], dtype=np.int64)
    args = (np.ascontiguousarray(omega.coeffs), np.array(grid.origin), grid.spacing,
            start, bshape, np.ascontiguousarray(centers), np.ascontiguousarray(weights),
            np.ascontiguousarray(tvals), cout, jax, cin, sign, n_out)
    if USE_NUMBA and n == 3:
        out = _kernels.homotopy_pairs_3d(*args)
    elif USE_NUMBA and n == 2:
        out = _kernels.homotopy_pairs_2d(*args)
    else:
        out = _kernels.homotopy_pairs_numpy(*args)
    return FormField(_subgrid(grid, box), omega.degree - 1, out)


def _check_degree(omega: FormField):
    if omega.degree < 1:
        raise ValueError("homotopy operator needs a form of degree >= 1")


def _check_center_inside(grid: Grid, pts: np.ndarray, what: str):
    for k, (lo, hi) in enumerate(grid.extent):
        if np.any(pts[:, k] < lo - 1e-12) or np.any(pts[:, k] > hi + 1e-12):
            raise ValueError(f"{what} outside the grid extent on axis {k}")


def poincare_ky(omega: FormField, y, config: HomotopyConfig = DEFAULT_CONFIG,
                region: Ball | None = None) -> FormField:
    """Segment homotopy operator K_y applied to an l-form (l >= 1).

    Evaluates at every node (or only inside ``region``); returns the
    (l-1)-form on the evaluated subgrid.
    """
    _check_degree(omega)
    y = np.asarray(y, dtype=float).reshape(1, -1)
    _check_center_inside(omega.grid, y, "base point y")
    tq, tw = config.t_rule()
    ell = omega.degree
    centers = np.repeat(y, len(tq), axis=0)
    weights = tw * tq ** (ell - 1)
    return _apply_pairs(omega, centers, weights, tq, _index_box(omega.grid, region))


def averaged_T(omega: FormField, scale: float = 1.0, center=None,
               config: HomotopyConfig = DEFAULT_CONFIG,
               region: Ball | None = None) -> FormField:
    """Averaged operator: scale r and center x0 conjugate the unit operator
    by x -> x0 + r x, which moves the averaging centers to x0 + r supp(phi)."""
    _check_degree(omega)
    n = omega.grid.n
    if center is None:
        center = np.zeros(n)
    center = np.asarray(center, dtype=float)
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    eta, phi_w = config.phi_rule(n)
    ycenters = center + scale * eta
    try:
        _check_center_inside(omega.grid, ycenters, "scaled mollifier support")
    except ValueError as e:
        raise ValueError(f"grid too small for the scaled averaging support: {e}") from e
    tq, tw = config.t_rule()
    ell = omega.degree
    centers = np.repeat(ycenters, len(tq), axis=0)
    tvals = np.tile(tq, len(eta))
    weights = np.repeat(phi_w, len(tq)) * np.tile(tw * tq ** (ell - 1), len(eta))
    return _apply_pairs(omega, centers, weights, tvals, _index_box(omega.grid, region))


def potential_map(rho: Frame, scale: float = 1.0, center=None,
                  config: HomotopyConfig = DEFAULT_CONFIG,
                  region: Ball | None = None):
    """T rho = (T rho_1, ..., T rho_n) as a sampled mapping."""
    from .degree import SampledMap

    outs = [averaged_T(f, scale, center, config, region) for f in rho.forms]
    values = np.stack([o.coeffs[0] for o in outs], axis=-1)
    return SampledMap(outs[0].grid, values)


def chain_residual(omega: FormField, scale: float = 1.0, center=None,
                   config: HomotopyConfig = DEFAULT_CONFIG) -> float:
    """Sup norm of w - d(T w) - T(d w) over B(center, scale/2).

    For top-degree forms d(w) vanishes identically and only the first
    two terms contribute.
    """
    grid = omega.grid
    n = grid.n
    if center is None:
        center = np.zeros(n)
    center = np.asarray(center, dtype=float)
    halo = 2 * grid.spacing
    ball = Ball(scale / 2.0 + halo, tuple(center))
    t_omega = averaged_T(omega, scale, center, config, region=ball)
    d_t = exterior_derivative(t_omega)

    sub = t_omega.grid
    mg = sub.meshgrid()
    r2 = sum((mg[k] - center[k]) ** 2 for k in range(n))
    sel = r2 <= (scale / 2.0) ** 2
    if not np.any(sel):
        raise ValueError("evaluation ball contains no grid nodes")

    # omega restricted to the subgrid node block
    box = _index_box(grid, ball)
    slc = tuple(slice(a, b) for a, b in box)
    resid = omega.coeffs[(slice(None),) + slc] - d_t.coeffs
    if omega.degree < n:
        t_d = averaged_T(exterior_derivative(omega), scale, center, config, region=ball)
        resid = resid - t_d.coeffs
    return float(np.max(np.abs(resid[:, sel])))


# -- exact conjugation bookkeeping -------------------------------------------


def scale_pullback(omega: FormField, r: float) -> FormField:
    """Pull back by x -> r x; exact on the rescaled grid (no interpolation)."""
    g = omega.grid
    new = Grid(g.dims, tuple(o / r for o in g.origin), g.spacing / r)
    return FormField(new, omega.degree, omega.coeffs * r**omega.degree)


def translation_pullback(omega: FormField, x0) -> FormField:
    """Pull back by x -> x + x0; exact on the shifted grid."""
    g = omega.grid
    x0 = np.asarray(x0, dtype=float)
    new = Grid(g.dims, tuple(o - x0[k] for k, o in enumerate(g.origin)), g.spacing)
    return FormField(new, omega.degree, omega.coeffs.copy())
