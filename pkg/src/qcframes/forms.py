"""Discretized differential forms and frames on uniform grids.

An l-form is stored as one real node array per increasing multi-index
(C(n, l) component arrays).  A frame is an n-tuple of 1-forms,
identified with the n x n matrix field whose row i holds the
coefficients of the i-th member; all pointwise linear algebra
(Jacobian, operator norm, distortion) happens through that matrix.

Derivatives use second-order central differences in the interior and
second-order one-sided stencils on the boundary, so d is first-order
consistent everywhere and second-order inside.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import Annulus, Ball, Grid, Region, region_weights

__all__ = [
    "FormField",
    "FormTuple",
    "Frame",
    "multi_indices",
    "exterior_derivative",
    "wedge",
    "hodge_star",
    "jacobian",
    "operator_norm",
    "hs_norm",
    "frame_derivative",
    "lp_norm",
    "lp_average",
    "DistortionResult",
    "distortion",
    "is_K_qc",
]


def multi_indices(n: int, ell: int) -> list[tuple[int, ...]]:
    """Increasing multi-indices of length ell in {0,..,n-1}, lexicographic."""
    return list(itertools.combinations(range(n), ell))


def _perm_sign(seq) -> int:
    """Sign of the permutation sorting ``seq`` (entries must be distinct)."""
    inv = 0
    s = list(seq)
    for i in range(len(s)):
        for j in range(i + 1, len(s)):
            if s[i] > s[j]:
                inv += 1
    return -1 if inv % 2 else 1


@dataclass(frozen=True)
class FormField:
    """Grid-sampled l-form: ``coeffs[c]`` is the node array of the c-th
    increasing multi-index of ``multi_indices(n, degree)``."""

    grid: Grid
    degree: int
    coeffs: np.ndarray  # shape (C(n, degree),) + grid.dims

    def __post_init__(self):
        n = self.grid.n
        if not 0 <= self.degree <= n:
            raise ValueError(f"form degree must be in 0..{n}, got {self.degree}")
        want = math.comb(n, self.degree)
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape != (want,) + self.grid.dims:
            raise ValueError(
                f"coeffs shape {coeffs.shape} != expected {(want,) + self.grid.dims}"
            )
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def indices(self) -> list[tuple[int, ...]]:
        return multi_indices(self.grid.n, self.degree)

    def component(self, index: tuple[int, ...]) -> np.ndarray:
        return self.coeffs[self.indices.index(tuple(index))]

    def pointwise_norm(self) -> np.ndarray:
        """Euclidean norm over coefficients at each node."""
        return np.sqrt(np.sum(self.coeffs**2, axis=0))

    def __add__(self, other: "FormField") -> "FormField":
        self._check_compatible(other)
        return FormField(self.grid, self.degree, self.coeffs + other.coeffs)

    def __sub__(self, other: "FormField") -> "FormField":
        self._check_compatible(other)
        return FormField(self.grid, self.degree, self.coeffs - other.coeffs)

    def __mul__(self, c: float) -> "FormField":
        return FormField(self.grid, self.degree, self.coeffs * float(c))

    __rmul__ = __mul__

    def __neg__(self) -> "FormField":
        return FormField(self.grid, self.degree, -self.coeffs)

    def _check_compatible(self, other: "FormField"):
        if self.grid != other.grid or self.degree != other.degree:
            raise ValueError("forms must share grid and degree")

    @staticmethod
    def zero(grid: Grid, degree: int) -> "FormField":
        return FormField(grid, degree, np.zeros((math.comb(grid.n, degree),) + grid.dims))

    @staticmethod
    def basis(grid: Grid, index: tuple[int, ...]) -> "FormField":
        """Constant basis form dx_I with coefficient 1."""
        ell = len(index)
        f = FormField.zero(grid, ell)
        f.coeffs[multi_indices(grid.n, ell).index(tuple(sorted(index)))] = 1.0
        return f

    @staticmethod
    def from_function(grid: Grid, degree: int, funcs) -> "FormField":
        """Sample coefficient callables (one per increasing multi-index)."""
        mg = grid.meshgrid()
        rows = [np.broadcast_to(np.asarray(f(*mg), dtype=float), grid.dims) for f in funcs]
        return FormField(grid, degree, np.stack(rows))


@dataclass(frozen=True)
class FormTuple:
    """n-tuple of equal-degree forms (e.g. the derivative d(rho) of a frame)."""

    grid: Grid
    degree: int
    coeffs: np.ndarray  # shape (n, C(n, degree)) + grid.dims

    @property
    def members(self) -> list[FormField]:
        return [FormField(self.grid, self.degree, self.coeffs[i]) for i in range(self.grid.n)]

    def pointwise_norm(self) -> np.ndarray:
        """Euclidean norm over all member coefficients at each node."""
        return np.sqrt(np.sum(self.coeffs**2, axis=(0, 1)))


@dataclass(frozen=True)
class Frame:
    """n 1-forms on a shared grid; ``matrix[..., i, j]`` is the dx_j
    coefficient of member i."""

    grid: Grid
    matrix: np.ndarray  # shape grid.dims + (n, n)

    def __post_init__(self):
        n = self.grid.n
        matrix = np.asarray(self.matrix, dtype=float)
        if matrix.shape != self.grid.dims + (n, n):
            raise ValueError(
                f"matrix shape {matrix.shape} != expected {self.grid.dims + (n, n)}"
            )
        object.__setattr__(self, "matrix", matrix)

    @property
    def n(self) -> int:
        return self.grid.n

    def form(self, i: int) -> FormField:
        """Member i as a 1-form."""
        comps = np.moveaxis(self.matrix[..., i, :], -1, 0)
        return FormField(self.grid, 1, np.ascontiguousarray(comps))

    @property
    def forms(self) -> list[FormField]:
        return [self.form(i) for i in range(self.n)]

    def __add__(self, other: "Frame") -> "Frame":
        return Frame(self.grid, self.matrix + other.matrix)

    def __sub__(self, other: "Frame") -> "Frame":
        return Frame(self.grid, self.matrix - other.matrix)

    def __mul__(self, c: float) -> "Frame":
        return Frame(self.grid, self.matrix * float(c))

    __rmul__ = __mul__

    @staticmethod
    def from_forms(forms: list[FormField]) -> "Frame":
        grid = forms[0].grid
        if len(forms) != grid.n or any(f.degree != 1 or f.grid != grid for f in forms):
            raise ValueError("frame needs n degree-1 forms on one grid")
        mat = np.stack([np.moveaxis(f.coeffs, 0, -1) for f in forms], axis=-2)
        return Frame(grid, mat)

    @staticmethod
    def standard(grid: Grid) -> "Frame":
        """The frame dx = (dx_1, ..., dx_n): identity matrix field."""
        mat = np.zeros(grid.dims + (grid.n, grid.n))
        for i in range(grid.n):
            mat[..., i, i] = 1.0
        return Frame(grid, mat)

    @staticmethod
    def from_matrix_function(grid: Grid, func) -> "Frame":
        """Sample a callable points(N, n) -> matrices(N, n, n)."""
        pts = grid.nodes()
        return Frame(grid, np.asarray(func(pts), dtype=float).reshape(grid.dims + (grid.n, grid.n)))


# -- derivative stencils ----------------------------------------------------

_D1_CACHE: dict[tuple[int, float], sp.csr_matrix] = {}


def derivative_matrix(m: int, h: float) -> sp.csr_matrix:
    """1D differentiation matrix: central interior, one-sided 2nd order at ends."""
    key = (m, h)
    if key not in _D1_CACHE:
        D = sp.lil_matrix((m, m))
        D[0, 0:3] = [-1.5, 2.0, -0.5]
        D[m - 1, m - 3:m] = [0.5, -2.0, 1.5]
        for i in range(1, m - 1):
            D[i, i - 1] = -0.5
            D[i, i + 1] = 0.5
        _D1_CACHE[key] = (D / h).tocsr()
    return _D1_CACHE[key]


def partial_derivative(values: np.ndarray, grid: Grid, axis: int, transpose: bool = False) -> np.ndarray:
    """Apply the axis stencil (or its transpose, for adjoint gradients)."""
    D = derivative_matrix(grid.dims[axis], grid.spacing)
    if transpose:
        D = D.T
    moved = np.moveaxis(values, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = D @ flat
    return np.moveaxis(out.reshape(moved.shape), 0, axis)


def exterior_derivative(omega: FormField) -> FormField:
    """Weak exterior differential d(omega), one degree up.

    (d omega)_J collects sign(j, I) * d_j omega_I over axes j not in I,
    where J = sorted(I + {j}) and the sign counts the transpositions
    moving dx_j into place.
    """
    n = omega.grid.n
    if omega.degree >= n:
        raise ValueError(f"no ({omega.degree + 1})-forms in dimension {n}")
    out_indices = multi_indices(n, omega.degree + 1)
    out = np.zeros((len(out_indices),) + omega.grid.dims)
    for ci, I in enumerate(omega.indices):
        for j in range(n):
            if j in I:
                continue
            J = tuple(sorted(I + (j,)))
            sign = (-1) ** J.index(j)
            out[out_indices.index(J)] += sign * partial_derivative(omega.coeffs[ci], omega.grid, j)
    return FormField(omega.grid, omega.degree + 1, out)


def frame_derivative(rho: Frame) -> FormTuple:
    """d(rho) = (d rho_1, ..., d rho_n) as an n-tuple of 2-forms."""
    ds = [exterior_derivative(f) for f in rho.forms]
    return FormTuple(rho.grid, 2, np.stack([d.coeffs for d in ds]))


# -- algebra ----------------------------------------------------------------


def wedge(alpha: FormField, beta: FormField) -> FormField:
    """Pointwise alternating product alpha ^ beta."""
    if alpha.grid != beta.grid:
        raise ValueError("wedge factors must share a grid")
    n = alpha.grid.n
    ell = alpha.degree + beta.degree
    if ell > n:
        raise ValueError(f"wedge degree {ell} exceeds dimension {n}")
    out_indices = multi_indices(n, ell)
    out = np.zeros((len(out_indices),) + alpha.grid.dims)
    for ca, I in enumerate(alpha.indices):
        for cb, J in enumerate(beta.indices):
            if set(I) & set(J):
                continue
            sign = _perm_sign(I + J)
            out[out_indices.index(tuple(sorted(I + J)))] += sign * alpha.coeffs[ca] * beta.coeffs[cb]
    return FormField(alpha.grid, ell, out)


def hodge_star(omega: FormField) -> FormField:
    """Euclidean Hodge star with standard orientation: *dx_I = sign * dx_Ic."""
    n = omega.grid.n
    out_indices = multi_indices(n, n - omega.degree)
    out = np.zeros((len(out_indices),) + omega.grid.dims)
    for ci, I in enumerate(omega.indices):
        Ic = tuple(k for k in range(n) if k not in I)
        sign = _perm_sign(I + Ic)
        out[out_indices.index(Ic)] += sign * omega.coeffs[ci]
    return FormField(omega.grid, n - omega.degree, out)


# -- pointwise frame quantities ---------------------------------------------


def jacobian(rho: Frame) -> FormField:
    """J_rho = *(rho_1 ^ ... ^ rho_n): the determinant of the matrix field."""
    det = np.linalg.det(rho.matrix)
    return FormField(rho.grid, 0, det[np.newaxis])


def operator_norm(rho: Frame) -> FormField:
    """Pointwise spectral norm (largest singular value) of the matrix field."""
    s = np.linalg.svd(rho.matrix, compute_uv=False)
    return FormField(rho.grid, 0, s[..., 0][np.newaxis])


def hs_norm(X: Frame | FormTuple) -> FormField:
    """Normalized Hilbert-Schmidt norm sqrt(sum(entries^2) / n)."""
    if isinstance(X, Frame):
        grid, sq = X.grid, np.sum(X.matrix**2, axis=(-2, -1))
    elif isinstance(X, FormTuple):
        grid, sq = X.grid, np.sum(X.coeffs**2, axis=(0, 1))
    else:
        raise TypeError(f"hs_norm expects Frame or FormTuple, got {type(X)!r}")
    return FormField(grid, 0, np.sqrt(sq / grid.n)[np.newaxis])


def _pointwise_field(obj, pointwise: str | None) -> tuple[Grid, np.ndarray]:
    if isinstance(obj, FormField):
        mode = pointwise or "euclidean"
        if mode != "euclidean":
            raise ValueError(f"single forms only support euclidean pointwise norm, got {mode}")
        return obj.grid, obj.pointwise_norm()
    if isinstance(obj, Frame):
        mode = pointwise or "operator"
        if mode == "operator":
            return obj.grid, operator_norm(obj).coeffs[0]
        if mode == "hs":
            return obj.grid, hs_norm(obj).coeffs[0]
        raise ValueError(f"unknown pointwise norm {mode!r} for frames")
    if isinstance(obj, FormTuple):
        mode = pointwise or "euclidean"
        if mode == "euclidean":
            return obj.grid, obj.pointwise_norm()
        if mode == "hs":
            return obj.grid, hs_norm(obj).coeffs[0]
        raise ValueError(f"unknown pointwise norm {mode!r} for form tuples")
    raise TypeError(f"cannot take norms of {type(obj)!r}")


def lp_norm(obj, p: float, region: Region = None, pointwise: str | None = None) -> float:
    """||obj||_{p, region} = (sum_nodes w(x) |obj(x)|^p h^n)^(1/p).

    The pointwise norm is chosen by the object type (operator norm for
    frames, Euclidean coefficient norm for forms and form tuples) and
    can be overridden with ``pointwise='hs'`` where the normalized
    Hilbert-Schmidt norm is wanted.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    grid, vals = _pointwise_field(obj, pointwise)
    w = region_weights(grid, region)
    return float(np.sum(w * vals**p) * grid.cell_volume()) ** (1.0 / p)


def lp_average(obj, p: float, region: Region = None, pointwise: str | None = None) -> float:
    """Volume-averaged norm (integral average over the region, then p-th root).

    Tuples and frames default to the normalized Hilbert-Schmidt norm,
    matching the integral averages used alongside it.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if pointwise is None and isinstance(obj, (Frame, FormTuple)):
        pointwise = "hs"
    grid, vals = _pointwise_field(obj, pointwise)
    w = region_weights(grid, region)
    vol = np.sum(w)
    return float(np.sum(w * vals**p) / vol) ** (1.0 / p)


# -- quasiconformal distortion ----------------------------------------------

# Numerical stand-ins for the a.e. statements: J below delta_J counts as
# degenerate; a degenerate point with |rho| below delta_rho satisfies the
# distortion inequality trivially (0 <= 0), otherwise distortion is +inf.
DELTA_RHO = 1e-10
DELTA_J_REL = 1e-10
QC_REL_TOL = 1e-6
QC_NODE_FRACTION = 1e-3


@dataclass(frozen=True)
class DistortionResult:
    """Pointwise distortion K(x) = |rho|^n / J_rho plus degeneracy masks."""

    field: np.ndarray
    ess_sup: float
    infinite_mask: np.ndarray  # J ~ 0 but |rho| > 0: flagged, K = +inf
    degenerate_mask: np.ndarray  # |rho| ~ 0 and J ~ 0: satisfies (QC) trivially


def distortion(rho: Frame, region: Region = None) -> DistortionResult:
    n = rho.n
    opn = operator_norm(rho).coeffs[0]
    J = jacobian(rho).coeffs[0]
    w = region_weights(rho.grid, region)
    inside = w > 0

    opn_n = opn**n
    med = np.median(opn_n[inside]) if np.any(inside) else 0.0
    delta_J = DELTA_J_REL * max(med, DELTA_RHO)

    degenerate = (J <= delta_J) & (opn <= DELTA_RHO)
    infinite = (J <= delta_J) & (opn > DELTA_RHO)
    K = np.ones_like(J)
    ok = J > delta_J
    K[ok] = opn_n[ok] / J[ok]
    K[infinite] = np.inf

    sel = inside & ~degenerate
    ess = float(np.max(K[sel])) if np.any(sel) else 1.0
    return DistortionResult(K, ess, infinite & inside, degenerate & inside)


def is_K_qc(rho: Frame, K: float, region: Region = None) -> bool:
    """Check |rho|^n <= K * J_rho on the region, with the tolerance policy:
    pass if K(x) <= K (1 + 1e-6) on all but a 1e-3 fraction of region nodes."""
    res = distortion(rho, region)
    w = region_weights(rho.grid, region)
    inside = w > 0
    bad = inside & ~res.degenerate_mask & (res.field > K * (1.0 + QC_REL_TOL))
    return int(np.sum(bad)) <= QC_NODE_FRACTION * int(np.sum(inside))
