"""Uniform Cartesian grids and integration regions.

A grid is a tensor lattice of nodes in R^n (n = 2 or 3) with uniform
spacing.  Regions (balls, annuli about the origin, or the whole grid)
enter all norm and energy computations through per-node quadrature
weights: each node owns a cell of volume h^n, and cells straddling a
region boundary get the sampled coverage fraction as weight.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid",
    "Ball",
    "Annulus",
    "WholeGrid",
    "region_weights",
    "region_volume",
]


@dataclass(frozen=True)
class Grid:
    """Uniform node lattice covering a box in R^n.

    dims[k] nodes along axis k, node coordinates
    origin[k] + i * spacing, i = 0..dims[k]-1.
    """

    dims: tuple[int, ...]
    origin: tuple[float, ...]
    spacing: float

    def __post_init__(self):
        if len(self.dims) not in (2, 3):
            raise ValueError(f"grid dimension must be 2 or 3, got {len(self.dims)}")
        if len(self.origin) != len(self.dims):
            raise ValueError("origin length must match dims length")
        if any(d < 8 for d in self.dims):
            raise ValueError(f"need at least 8 nodes per axis, got dims={self.dims}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def extent(self) -> tuple[tuple[float, float], ...]:
        """Per-axis (min, max) of the node lattice."""
        return tuple(
            (o, o + (d - 1) * self.spacing) for o, d in zip(self.origin, self.dims)
        )

    def axis(self, k: int) -> np.ndarray:
        return self.origin[k] + self.spacing * np.arange(self.dims[k])

    def axes(self) -> list[np.ndarray]:
        return [self.axis(k) for k in range(self.n)]

    def meshgrid(self) -> list[np.ndarray]:
        """Coordinate arrays of shape ``dims``, one per axis."""
        return list(np.meshgrid(*self.axes(), indexing="ij"))

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (prod(dims), n)."""
        mg = self.meshgrid()
        return np.stack([m.ravel() for m in mg], axis=-1)

    def radii(self) -> np.ndarray:
        """Distance of every node from the origin of R^n, shape ``dims``."""
        mg = self.meshgrid()
        return np.sqrt(sum(m * m for m in mg))

    def contains_ball(self, center, radius: float, margin: float = 0.0) -> bool:
        c = np.asarray(center, dtype=float)
        for k, (lo, hi) in enumerate(self.extent):
            if c[k] - radius < lo - margin or c[k] + radius > hi + margin:
                return False
        return True

    def cell_volume(self) -> float:
        return self.spacing ** self.n

    @staticmethod
    def cube(n: int, res: int, halfwidth: float = 1.0) -> "Grid":
        """Symmetric cube [-halfwidth, halfwidth]^n with ``res`` nodes per axis."""
        h = 2.0 * halfwidth / (res - 1)
        return Grid(dims=(res,) * n, origin=(-halfwidth,) * n, spacing=h)


@dataclass(frozen=True)
class Ball:
    """Euclidean ball B(center, radius)."""

    radius: float
    center: tuple[float, ...] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"ball radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def indicator(self, points: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center[: points.shape[-1]])
        return np.sum((points - c) ** 2, axis=-1) <= self.radius**2

    def volume(self, n: int) -> float:
        if n == 2:
            return np.pi * self.radius**2
        return 4.0 / 3.0 * np.pi * self.radius**3

    def doubled(self) -> "Ball":
        return Ball(2.0 * self.radius, self.center)


@dataclass(frozen=True)
class Annulus:
    """A(r, R) = B(R) \\ closed B(r), centered at the origin."""

    r: float
    R: float

    def __post_init__(self):
        if not 0 < self.r < self.R:
            raise ValueError(f"annulus radii must satisfy 0 < r < R, got r={self.r}, R={self.R}")

    def indicator(self, points: np.ndarray) -> np.ndarray:
        s2 = np.sum(points**2, axis=-1)
        return (s2 > self.r**2) & (s2 <= self.R**2)

    def volume(self, n: int) -> float:
        return Ball(self.R).volume(n) - Ball(self.r).volume(n)


@dataclass(frozen=True)
class WholeGrid:
    """Marker region: every node gets full weight."""


Region = Ball | Annulus | WholeGrid | None

# Sub-sampling offsets for boundary-cell coverage fractions: each node
# cell is probed at the centers of its 3^n subcells.
_SUBDIV = 3


def _subsample_offsets(n: int) -> np.ndarray:
    line = (np.arange(_SUBDIV) - (_SUBDIV - 1) / 2.0) / _SUBDIV
    return np.array(list(itertools.product(line, repeat=n)))


def region_weights(grid: Grid, region: Region) -> np.ndarray:
    """Quadrature weights in [0, 1] per node, shape ``grid.dims``.

    Midpoint rule over node cells; cells straddling the region boundary
    get the fraction of 3^n subcell centers that fall inside.  Multiply
    by h^n and sum against an integrand to integrate over the region.
    """
    if region is None or isinstance(region, WholeGrid):
        return np.ones(grid.dims)
    pts = grid.nodes()
    h = grid.spacing
    acc = np.zeros(pts.shape[0])
    for off in _subsample_offsets(grid.n):
        acc += region.indicator(pts + h * off)
    w = acc / _SUBDIV**grid.n
    if not np.any(w > 0):
        raise ValueError(f"region {region} does not intersect the grid")
    return w.reshape(grid.dims)


def region_volume(grid: Grid, region: Region) -> float:
    """Quadrature volume of the region (consistent with region_weights)."""
    return float(np.sum(region_weights(grid, region))) * grid.cell_volume()
