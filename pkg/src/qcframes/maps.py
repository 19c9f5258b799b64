"""Closed-form map zoo and pullbacks of forms and frames.

Zoo entries carry a mapping f and its differential Df in closed form;
``entry.frame(grid)`` samples df = (df_1, ..., df_n) as a frame (the
matrix field of the frame is exactly Df).  Pullbacks evaluate
(lambda* w)(x) = w(lambda(x)) composed with D(lambda)(x) through the
minors of the differential.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .forms import FormField, Frame, multi_indices
from .grid import Grid
from .interpolation import interpolate_many

__all__ = [
    "MapZooEntry",
    "zoo",
    "zoo_from_string",
    "rotation_frame",
    "RadialMap",
    "ComposedMap",
    "pullback_coefficients",
    "pullback",
    "pullback_frame",
]

_AXIS_EPS = 1e-12


@dataclass(frozen=True)
class MapZooEntry:
    """Closed-form mapping R^n -> R^n with differential and metadata."""

    name: str
    n: int
    f: callable = field(repr=False)
    df: callable = field(repr=False)
    params: dict = field(default_factory=dict)
    domain_note: str = ""

    def at(self, points: np.ndarray) -> np.ndarray:
        return self.f(np.atleast_2d(np.asarray(points, dtype=float)))

    def d_at(self, points: np.ndarray) -> np.ndarray:
        return self.df(np.atleast_2d(np.asarray(points, dtype=float)))

    def frame(self, grid: Grid) -> Frame:
        """The differential frame df sampled on the grid."""
        if grid.n != self.n:
            raise ValueError(f"{self.name} is {self.n}-dimensional, grid is {grid.n}-dimensional")
        return Frame(grid, self.d_at(grid.nodes()).reshape(grid.dims + (self.n, self.n)))

    def sampled(self, grid: Grid):
        from .degree import SampledMap

        return SampledMap(grid, self.at(grid.nodes()).reshape(grid.dims + (self.n,)))


def _identity(n: int) -> MapZooEntry:
    def f(p):
        return p.copy()

    def df(p):
        return np.broadcast_to(np.eye(n), (p.shape[0], n, n)).copy()

    return MapZooEntry("identity", n, f, df)


def _scaling(n: int, c: float) -> MapZooEntry:
    def f(p):
        return c * p

    def df(p):
        return np.broadcast_to(c * np.eye(n), (p.shape[0], n, n)).copy()

    return MapZooEntry("scaling", n, f, df, {"c": c})


def _winding2d(k: int) -> MapZooEntry:
    """z -> z^k as a map of the plane; conformal away from the origin."""

    def f(p):
        z = (p[:, 0] + 1j * p[:, 1]) ** k
        return np.stack([z.real, z.imag], axis=-1)

    def df(p):
        dz = k * (p[:, 0] + 1j * p[:, 1]) ** (k - 1)
        out = np.empty((p.shape[0], 2, 2))
        out[:, 0, 0] = dz.real
        out[:, 0, 1] = -dz.imag
        out[:, 1, 0] = dz.imag
        out[:, 1, 1] = dz.real
        return out

    return MapZooEntry("winding2d", 2, f, df, {"k": k},
                       domain_note="Df degenerates at the origin for k >= 2")


def _winding3d(k: int) -> MapZooEntry:
    """Cylindrical (s, theta, z) -> (s, k theta, z)."""

    def f(p):
        s = np.hypot(p[:, 0], p[:, 1])
        th = np.arctan2(p[:, 1], p[:, 0])
        return np.stack([s * np.cos(k * th), s * np.sin(k * th), p[:, 2]], axis=-1)

    def df(p):
        s = np.maximum(np.hypot(p[:, 0], p[:, 1]), _AXIS_EPS)
        c, sn = p[:, 0] / s, p[:, 1] / s
        kc = np.cos(k * np.arctan2(p[:, 1], p[:, 0]))
        ks = np.sin(k * np.arctan2(p[:, 1], p[:, 0]))
        out = np.zeros((p.shape[0], 3, 3))
        out[:, 0, 0] = c * kc + k * ks * sn
        out[:, 0, 1] = sn * kc - k * ks * c
        out[:, 1, 0] = c * ks - k * kc * sn
        out[:, 1, 1] = sn * ks + k * kc * c
        out[:, 2, 2] = 1.0
        return out

    return MapZooEntry("winding3d", 3, f, df, {"k": k},
                       domain_note="distortion is k^2 off the axis s = 0; exclude the axis")


def _radial_stretch(n: int, alpha: float) -> MapZooEntry:
    """x -> |x|^(alpha - 1) x."""

    def f(p):
        s = np.maximum(np.linalg.norm(p, axis=1), _AXIS_EPS)
        return (s ** (alpha - 1.0))[:, None] * p

    def df(p):
        s = np.maximum(np.linalg.norm(p, axis=1), _AXIS_EPS)
        xh = p / s[:, None]
        eye = np.broadcast_to(np.eye(n), (p.shape[0], n, n))
        proj = xh[:, :, None] * xh[:, None, :]
        return (s ** (alpha - 1.0))[:, None, None] * (eye + (alpha - 1.0) * proj)

    return MapZooEntry("radial_stretch", n, f, df, {"alpha": alpha},
                       domain_note="exclude the origin")


def _fold(n: int, c: float) -> MapZooEntry:
    """Orientation-reversing fold across the plane x_1 = c."""

    def f(p):
        out = p.copy()
        out[:, 0] = c + np.abs(p[:, 0] - c)
        return out

    def df(p):
        out = np.broadcast_to(np.eye(n), (p.shape[0], n, n)).copy()
        out[:, 0, 0] = np.sign(p[:, 0] - c)
        return out

    return MapZooEntry("fold", n, f, df, {"c": c},
                       domain_note=f"Df jumps across the fold plane x1 = {c}")


def zoo(name: str, n: int | None = None, **params) -> MapZooEntry:
    """Construct a zoo map by name.

    Known names: identity, scaling(c), winding2d(k), winding3d(k),
    radial_stretch(alpha), fold(c).
    """
    if name == "identity":
        return _identity(n or 3)
    if name == "scaling":
        return _scaling(n or 3, float(params.get("c", 2.0)))
    if name == "winding2d":
        return _winding2d(int(params.get("k", 2)))
    if name == "winding3d":
        return _winding3d(int(params.get("k", 2)))
    if name == "radial_stretch":
        return _radial_stretch(n or 3, float(params.get("alpha", 1.5)))
    if name == "fold":
        return _fold(n or 2, float(params.get("c", 0.3)))
    raise ValueError(f"unknown zoo map {name!r}")


def zoo_from_string(spec: str, n: int | None = None) -> MapZooEntry:
    """Parse CLI-style selectors like ``winding2d:k=2`` or ``identity``."""
    name, _, rest = spec.partition(":")
    params = {}
    if rest:
        for item in rest.split(","):
            key, _, val = item.partition("=")
            if not val:
                raise ValueError(f"malformed map parameter {item!r} in {spec!r}")
            params[key.strip()] = float(val)
    return zoo(name.strip(), n, **params)


def rotation_frame(grid: Grid, gamma: float, taper: tuple[float, float] | None = None) -> Frame:
    """Non-closed frame dx + gamma b(|x|) (x2 dx1 - x1 dx2) e1.

    The first member picks up the rotational 1-form, whose differential
    is -2 gamma b dx1^dx2 (plus taper terms), so the frame cannot be
    connected to dx by any closed frame: every connecting frame carries
    a positive amount of q-energy.  ``taper`` = (t0, t1) ramps the
    perturbation down smoothly between radii t0 and t1 (the frame is dx
    beyond t1); None keeps it global.
    """
    pts = grid.nodes()
    n = grid.n
    if taper is None:
        b = np.ones(pts.shape[0])
    else:
        t0, t1 = taper
        s = np.linalg.norm(pts, axis=1)
        u = np.clip((s - t0) / (t1 - t0), 0.0, 1.0)
        b = (1.0 - u**2) ** 2
    mat = np.broadcast_to(np.eye(n), (pts.shape[0], n, n)).copy()
    mat[:, 0, 0] += gamma * b * pts[:, 1]
    mat[:, 0, 1] -= gamma * b * pts[:, 0]
    return Frame(grid, mat.reshape(grid.dims + (n, n)))


@dataclass(frozen=True)
class RadialMap:
    """x -> g(|x|) x / |x| with closed-form g and g'."""

    g: callable = field(repr=False)
    gp: callable = field(repr=False)
    name: str = "radial"

    def at(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        s = np.maximum(np.linalg.norm(p, axis=1), _AXIS_EPS)
        return (self.g(s) / s)[:, None] * p

    def d_at(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        n = p.shape[1]
        s = np.maximum(np.linalg.norm(p, axis=1), _AXIS_EPS)
        xh = p / s[:, None]
        proj = xh[:, :, None] * xh[:, None, :]
        eye = np.broadcast_to(np.eye(n), (p.shape[0], n, n))
        return (self.gp(s))[:, None, None] * proj + (self.g(s) / s)[:, None, None] * (eye - proj)


@dataclass(frozen=True)
class ComposedMap:
    outer: object
    inner: object

    def at(self, points):
        return self.outer.at(self.inner.at(points))

    def d_at(self, points):
        mid = self.inner.at(points)
        return np.einsum("nij,njk->nik", self.outer.d_at(mid), self.inner.d_at(points))


# -- pullbacks -----------------------------------------------------------------


def pullback_coefficients(coeffs_at_image: np.ndarray, df: np.ndarray, ell: int) -> np.ndarray:
    """Combine form coefficients at lambda(x) with minors of D(lambda).

    coeffs_at_image: (C(n, ell), N) values of w_I at the image points.
    df: (N, n, n).  Returns (C(n, ell), N) coefficients of lambda* w:
    (lambda* w)_J = sum_I w_I(lambda x) det(df[I rows, J cols]).
    """
    n = df.shape[1]
    idx = multi_indices(n, ell)
    out = np.zeros_like(coeffs_at_image)
    if ell == 0:
        return coeffs_at_image.copy()
    for cj, J in enumerate(idx):
        for ci, I in enumerate(idx):
            sub = df[:, I][:, :, J]
            minor = np.linalg.det(sub) if ell > 1 else sub[:, 0, 0]
            out[cj] += coeffs_at_image[ci] * minor
    return out


def pullback(lam, omega: FormField, target_grid: Grid | None = None) -> FormField:
    """Pull an l-form back along a differentiable map handle.

    ``lam`` needs ``at`` and ``d_at``; the form is interpolated at the
    image points (clamped outside its grid).  The result lives on
    ``target_grid`` (default: the form's own grid).
    """
    grid = target_grid or omega.grid
    pts = grid.nodes()
    image = lam.at(pts)
    c_at = interpolate_many(omega.coeffs, omega.grid, image)
    out = pullback_coefficients(c_at, lam.d_at(pts), omega.degree)
    return FormField(grid, omega.degree, out.reshape((-1,) + grid.dims))


def pullback_frame(lam, rho, grid: Grid) -> Frame:
    """Pull a frame back: M'(x) = M(lambda(x)) D(lambda)(x).

    ``rho`` may be a Frame (entries interpolated), a MapZooEntry (its
    differential is used in closed form), or anything with
    ``matrix_at(points)``.
    """
    pts = grid.nodes()
    image = lam.at(pts)
    if isinstance(rho, Frame):
        comps = rho.matrix.reshape(rho.grid.dims + (-1,))
        vals = interpolate_many(np.moveaxis(comps, -1, 0), rho.grid, image)
        M = vals.T.reshape(-1, grid.n, grid.n)
    elif isinstance(rho, MapZooEntry):
        M = rho.d_at(image)
    else:
        M = rho.matrix_at(image)
    out = np.einsum("nij,njk->nik", M, lam.d_at(pts))
    return Frame(grid, out.reshape(grid.dims + (grid.n, grid.n)))
