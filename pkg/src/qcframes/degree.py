"""Topological degree of continuous maps on balls and annuli.

The local degree at y with respect to a ball is the mapping degree of
the normalized boundary map x -> (f(rx) - y)/|f(rx) - y|, computed as a
total signed angle (n = 2) or a sum of signed solid angles over a
triangulated sphere (n = 3), divided by the full angle.  Annulus
degrees come from additivity: deg(A(r, R)) = deg(B(R)) - deg(B(r)).

Degree sweeps evaluate a whole y-grid at once, mask points too close to
the boundary image, and fill masked nodes by component constancy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .forms import FormField, multi_indices, partial_derivative
from .grid import Annulus, Ball, Grid
from .interpolation import interpolate_many

__all__ = [
    "SampledMap",
    "DegreeField",
    "UnresolvedDegreeError",
    "circle_points",
    "icosphere",
    "degree_winding",
    "degree_sweep",
    "SolidAngleForm",
    "solid_angle_form",
    "degree_cov",
    "excess_degree_integral",
    "negative_degree_integral",
]


class UnresolvedDegreeError(RuntimeError):
    """Raised when winding residuals stay above tolerance after refinement."""


@dataclass(frozen=True)
class SampledMap:
    """Grid-sampled mapping into R^n; off-node evaluation is multilinear."""

    grid: Grid
    values: np.ndarray  # shape grid.dims + (n,)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.dims + (self.grid.n,):
            raise ValueError(
                f"values shape {values.shape} != expected {self.grid.dims + (self.grid.n,)}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("sampled map contains non-finite values")
        object.__setattr__(self, "values", values)

    def at(self, points: np.ndarray) -> np.ndarray:
        comps = np.moveaxis(self.values, -1, 0)
        return interpolate_many(comps, self.grid, points).T

    def d_at(self, points: np.ndarray) -> np.ndarray:
        """Differential Df at points, (N, n, n), from grid stencils."""
        n = self.grid.n
        rows = []
        for i in range(n):
            for j in range(n):
                rows.append(partial_derivative(self.values[..., i], self.grid, j))
        vals = interpolate_many(np.stack(rows), self.grid, points)
        return vals.T.reshape(-1, n, n)

    @staticmethod
    def sample(grid: Grid, func) -> "SampledMap":
        return SampledMap(grid, np.asarray(func(grid.nodes()), dtype=float).reshape(grid.dims + (grid.n,)))


@dataclass(frozen=True)
class DegreeField:
    """Integer degree values on a y-grid, with the near-boundary mask."""

    grid: Grid
    values: np.ndarray  # int, shape grid.dims
    mask: np.ndarray  # bool, True where y was too close to f(boundary)

    def to_csv(self, path) -> None:
        pts = self.grid.nodes()
        deg = self.values.ravel()
        msk = self.mask.ravel().astype(int)
        n = self.grid.n
        header = ",".join(f"y{k + 1}" for k in range(n)) + ",deg,mask"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for i in range(pts.shape[0]):
                coords = ",".join(repr(float(c)) for c in pts[i])
                fh.write(f"{coords},{int(deg[i])},{int(msk[i])}\n")


# -- boundary meshes ---------------------------------------------------------


def circle_points(radius: float, m: int, center=(0.0, 0.0)) -> np.ndarray:
    th = 2.0 * np.pi * np.arange(m) / m
    return np.stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)], axis=-1)


def icosphere(subdivisions: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron: (verts (V, 3), faces (F, 3)), F = 20 * 4^k."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                v = np.array(verts[a]) + np.array(verts[b])
                v /= np.linalg.norm(v)
                cache[key] = len(verts)
                verts.append(tuple(v))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center)
    return v, np.array(faces, dtype=np.int64)


# Production boundary resolutions (doubled on refinement until the
# winding residual drops below tolerance).
CIRCLE_POINTS = 2048
ICOSPHERE_SUBDIV = 5  # 20 * 4^5 = 20480 faces
RESIDUAL_TOL = 0.1
MAX_REFINEMENTS = 3


def _angle_sums(image: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if _kernels.HAVE_NUMBA:
        return _kernels.winding_sweep_2d(np.ascontiguousarray(image),
                                         np.ascontiguousarray(targets))
    prev = image[-1] - targets  # (M, 2)
    total = np.zeros(targets.shape[0])
    for b in range(image.shape[0]):
        cur = image[b] - targets
        cross = prev[:, 0] * cur[:, 1] - prev[:, 1] * cur[:, 0]
        dot = np.sum(prev * cur, axis=1)
        total += np.arctan2(cross, dot)
        prev = cur
    return total


def _solid_angle_sums(verts: np.ndarray, faces: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if _kernels.HAVE_NUMBA:
        return _kernels.solid_angle_sweep(np.ascontiguousarray(verts),
                                          np.ascontiguousarray(faces),
                                          np.ascontiguousarray(targets))
    a = verts[faces[:, 0]]
    b = verts[faces[:, 1]]
    c = verts[faces[:, 2]]
    out = np.zeros(targets.shape[0])
    for m in range(targets.shape[0]):
        ra, rb, rc = a - targets[m], b - targets[m], c - targets[m]
        la = np.linalg.norm(ra, axis=1)
        lb = np.linalg.norm(rb, axis=1)
        lc = np.linalg.norm(rc, axis=1)
        triple = np.einsum("ij,ij->i", ra, np.cross(rb, rc))
        denom = (la * lb * lc + np.einsum("ij,ij->i", ra, rb) * lc
                 + np.einsum("ij,ij->i", ra, rc) * lb
                 + np.einsum("ij,ij->i", rb, rc) * la)
        out[m] = 2.0 * np.sum(np.arctan2(triple, denom))
    return out


def _boundary_image(f, ball: Ball, n: int, refine: int):
    if n == 2:
        pts = circle_points(ball.radius, CIRCLE_POINTS * 2**refine, ball.center)
        image = f.at(pts)
        edge = np.max(np.linalg.norm(np.diff(image, axis=0, append=image[:1]), axis=1))
        return image, None, edge
    verts, faces = icosphere(ICOSPHERE_SUBDIV + refine, ball.radius, ball.center)
    image = f.at(verts)
    edges = np.concatenate([
        np.linalg.norm(image[faces[:, 0]] - image[faces[:, 1]], axis=1),
        np.linalg.norm(image[faces[:, 1]] - image[faces[:, 2]], axis=1),
        np.linalg.norm(image[faces[:, 2]] - image[faces[:, 0]], axis=1),
    ])
    return image, faces, float(np.max(edges))


def _winding_raw(f, ball: Ball, targets: np.ndarray, n: int, refine: int):
    """Raw (float) degrees and the masked set for one boundary sphere."""
    image, faces, edge = _boundary_image(f, ball, n, refine)
    tree = cKDTree(image)
    dist, _ = tree.query(targets)
    masked = dist <= 2.0 * edge
    if n == 2:
        raw = _angle_sums(image, targets) / (2.0 * np.pi)
    else:
        raw = _solid_angle_sums(image, faces, targets) / (4.0 * np.pi)
    return raw, masked


def degree_winding(f, y, G: Ball | Annulus) -> int:
    """Local degree deg(y, f, G) for a single target point."""
    y = np.asarray(y, dtype=float).reshape(1, -1)
    n = y.shape[1]
    balls = [G] if isinstance(G, Ball) else [Ball(G.R), Ball(G.r)]
    total = 0
    for sgn, ball in zip((1, -1), balls):
        for refine in range(MAX_REFINEMENTS + 1):
            raw, masked = _winding_raw(f, ball, y, n, refine)
            if masked[0]:
                if refine == MAX_REFINEMENTS:
                    raise UnresolvedDegreeError(
                        f"target {y[0]} is too close to the boundary image of {ball}"
                    )
                continue
            k = int(np.round(raw[0]))
            if abs(raw[0] - k) <= RESIDUAL_TOL:
                total += sgn * k
                break
            if refine == MAX_REFINEMENTS:
                raise UnresolvedDegreeError(
                    f"winding residual {abs(raw[0] - k):.3f} > {RESIDUAL_TOL} after refinement"
                )
        if isinstance(G, Ball):
            break
    return total


def _flood_fill(values: np.ndarray, resolved: np.ndarray) -> np.ndarray:
    """Fill unresolved nodes from face-neighbors (component constancy)."""
    vals = values.copy()
    res = resolved.copy()
    n = vals.ndim
    while not res.all():
        progress = False
        for axis in range(n):
            for shift in (1, -1):
                nb_res = np.roll(res, shift, axis=axis)
                nb_val = np.roll(vals, shift, axis=axis)
                # roll wraps around; sever the wrapped slice
                sl = [slice(None)] * n
                sl[axis] = 0 if shift == 1 else -1
                nb_res[tuple(sl)] = False
                take = ~res & nb_res
                if np.any(take):
                    vals[take] = nb_val[take]
                    res |= take
                    progress = True
        if not progress:
            vals[~res] = 0
            break
    return vals


def degree_sweep(f, G: Ball | Annulus, y_grid: Grid,
                 max_unresolved_fraction: float = 0.01) -> DegreeField:
    """Degree field deg(y, f, G) over all nodes of ``y_grid``.

    Masked nodes (closer to f(boundary) than twice the image mesh size)
    are filled by flood fill from resolved neighbors; any unmasked node
    whose winding residual stays above tolerance counts as unresolved,
    and more than ``max_unresolved_fraction`` of those is an error.
    """
    targets = y_grid.nodes()
    n = y_grid.n
    balls = [G] if isinstance(G, Ball) else [Ball(G.R), Ball(G.r)]
    total = np.zeros(targets.shape[0])
    mask = np.zeros(targets.shape[0], dtype=bool)
    unresolved = np.zeros(targets.shape[0], dtype=bool)
    for sgn, ball in zip((1, -1), balls):
        raw, masked = _winding_raw(f, ball, targets, n, refine=0)
        k = np.round(raw)
        bad = ~masked & (np.abs(raw - k) > RESIDUAL_TOL)
        for refine in range(1, MAX_REFINEMENTS + 1):
            if not np.any(bad):
                break
            raw_b, masked_b = _winding_raw(f, ball, targets[bad], n, refine)
            k_b = np.round(raw_b)
            still = ~masked_b & (np.abs(raw_b - k_b) > RESIDUAL_TOL)
            k[bad] = k_b
            masked[bad] |= masked_b
            new_bad = bad.copy()
            new_bad[bad] = still
            bad = new_bad
        unresolved |= bad
        total += sgn * k
        mask |= masked
    if np.sum(unresolved) > max_unresolved_fraction * targets.shape[0]:
        raise UnresolvedDegreeError(
            f"{int(np.sum(unresolved))} of {targets.shape[0]} sweep nodes unresolved"
        )
    vals = total.reshape(y_grid.dims)
    resolved = ~(mask | unresolved).reshape(y_grid.dims)
    filled = _flood_fill(vals, resolved)
    return DegreeField(y_grid, np.round(filled).astype(np.int64), ~resolved)


# -- solid-angle form ---------------------------------------------------------


class SolidAngleForm:
    """The closed (n-1)-form x -> sum_j x_j / |x|^n (star dx_j)."""

    def __init__(self, n: int):
        if n not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {n}")
        self.n = n
        # coefficient table: star dx_j = star_sign[j] * dx_{complement(j)}
        self.out_indices = multi_indices(n, n - 1)
        self.star_target = []
        self.star_sign = []
        for j in range(n):
            comp = tuple(k for k in range(n) if k != j)
            self.star_target.append(self.out_indices.index(comp))
            self.star_sign.append((-1.0) ** j)

    def coefficients(self, points: np.ndarray) -> np.ndarray:
        """Coefficient arrays (C(n, n-1), N) in increasing-index order."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(pts, axis=1)
        if np.any(r == 0):
            raise ValueError("solid-angle form is singular at the origin")
        out = np.zeros((len(self.out_indices), pts.shape[0]))
        for j in range(self.n):
            out[self.star_target[j]] += self.star_sign[j] * pts[:, j] / r**self.n
        return out

    def integrate_sphere(self, radius: float = 1.0, refine: int = 0) -> float:
        """Boundary integral of the form over S^{n-1}(radius)."""
        if self.n == 2:
            pts = circle_points(radius, CIRCLE_POINTS * 2**refine)
            nxt = np.roll(pts, -1, axis=0)
            mid = 0.5 * (pts + nxt)
            c = self.coefficients(mid)  # (2, M): coeffs of dx1, dx2
            d = nxt - pts
            return float(np.sum(c[0] * d[:, 0] + c[1] * d[:, 1]))
        verts, faces = icosphere(ICOSPHERE_SUBDIV + refine, radius)
        a, b, c3 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
        cent = (a + b + c3) / 3.0
        co = self.coefficients(cent)  # (3, F) for (01), (02), (12)
        u = b - a
        v = c3 - a
        total = 0.0
        for ci, (i, j) in enumerate(self.out_indices):
            total += np.sum(co[ci] * (u[:, i] * v[:, j] - u[:, j] * v[:, i])) * 0.5
        return float(total)

    def pullback_at(self, f_vals: np.ndarray, df_vals: np.ndarray) -> np.ndarray:
        """(f* form) coefficients (C(n, n-1), N) given f and Df at points."""
        from .maps import pullback_coefficients

        co = self.coefficients(f_vals)
        return pullback_coefficients(co, df_vals, self.n - 1)


def solid_angle_form(n: int) -> SolidAngleForm:
    return SolidAngleForm(n)


# -- integral quantities -------------------------------------------------------


def degree_cov(f, eta, G: Ball | Annulus, grid: Grid) -> float:
    """Left side of the change-of-variables identity:
    integral over G of eta(f(x)) J_f(x) dx by grid quadrature."""
    from .grid import region_weights

    w = region_weights(grid, G)
    pts = grid.nodes()
    fv = f.at(pts)
    df = f.d_at(pts)
    J = np.linalg.det(df)
    vals = np.asarray(eta(fv), dtype=float) * J
    return float(np.sum(w.ravel() * vals) * grid.cell_volume())


def _sweep_grid_for_image(f, boundary_pts: np.ndarray, n: int, y_res: int, pad: float) -> Grid:
    image = f.at(boundary_pts)
    lo = image.min(axis=0) - pad
    hi = image.max(axis=0) + pad
    h = float(np.max(hi - lo)) / (y_res - 1)
    return Grid((y_res,) * n, tuple(lo), h)


def excess_degree_integral(f, B: Ball, y_res: int | None = None,
                           return_field: bool = False):
    """Integral of max(deg(y, f, B) - 1, 0) dy over a y-grid sweep."""
    n = len(B.center)
    if y_res is None:
        y_res = f.grid.dims[0] if isinstance(f, SampledMap) else (256 if n == 2 else 32)
    if n == 2:
        bpts = circle_points(B.radius, CIRCLE_POINTS, B.center)
    else:
        bpts, _ = icosphere(ICOSPHERE_SUBDIV, B.radius, B.center)
    ygrid = _sweep_grid_for_image(f, bpts, n, y_res, pad=0.05 * B.radius)
    field = degree_sweep(f, B, ygrid)
    excess = np.maximum(field.values - 1, 0)
    val = float(np.sum(excess) * ygrid.cell_volume())
    if return_field:
        return val, field
    return val


def _map_dim(f) -> int:
    try:
        return f.grid.n
    except AttributeError:
        return f.n


def negative_degree_integral(f, A: Annulus, y_res: int | None = None,
                             return_field: bool = False):
    """-integral of deg(y, f, A) over {deg < 0}, via the same sweep."""
    n = _map_dim(f)
    if y_res is None:
        y_res = f.grid.dims[0] if isinstance(f, SampledMap) else (256 if n == 2 else 32)
    if n == 2:
        bpts = np.concatenate([circle_points(A.R, CIRCLE_POINTS),
                               circle_points(A.r, CIRCLE_POINTS)])
    else:
        bpts = np.concatenate([icosphere(ICOSPHERE_SUBDIV, A.R)[0],
                               icosphere(ICOSPHERE_SUBDIV, A.r)[0]])
    ygrid = _sweep_grid_for_image(f, bpts, n, y_res, pad=0.05 * A.R)
    field = degree_sweep(f, A, ygrid)
    neg = np.minimum(field.values, 0)
    val = -float(np.sum(neg) * ygrid.cell_volume())
    if return_field:
        return val, field
    return val
