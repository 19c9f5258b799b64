"""Quasiconformal gluing of an inner and an outer frame across an annulus.

Given radii r < r' < R' < R and frames rho_0 (inner, defined through
B(r')) and rho_1 (outer, defined outside B(R')), the glued frame is

    rho_0                      on B(r),
    theta(|x|) (lam_0* rho_0)  on A(r, r0),
    theta(|x|) (lam_1* rho_1)  on A(r0, R),
    rho_1                      outside B(R),

with r0 = (r' + R')/2, the radial collar maps

    lam_0(x) = ((r'-r)/(r0-r) (|x|-r) + r) x/|x|      A(r, r0) -> A(r, r'),
    lam_1(x) = ((R-R')/(R-r0) (|x|-r0) + R') x/|x|    A(r0, R) -> A(R', R),

and a C^2 cutoff theta that is 1 below r' and above R', vanishes on a
plateau around r0, and keeps |theta'| <= 3/(R' - r').  Where theta
vanishes the frame is zero, which satisfies the distortion inequality
trivially; the distortion report excludes and flags that collar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forms import Frame, distortion, frame_derivative, is_K_qc, lp_norm
from .grid import Annulus, Grid
from .maps import MapZooEntry, RadialMap, pullback_frame

__all__ = ["CutoffProfile", "GlueSpec", "GlueResult", "glue_frames"]


def _smoothstep_integral(v: np.ndarray) -> np.ndarray:
    """Antiderivative of the quintic smoothstep 6v^5 - 15v^4 + 10v^3 on [0, 1]."""
    return v**6 - 3.0 * v**5 + 2.5 * v**4


class CutoffProfile:
    """C^2 ramp pair: 1 on [0, r'], 0 on a plateau around r0, 1 from R' on.

    The ramps use a trapezoidal slope profile with quintic-smoothed
    edges, so the maximum slope stays at 8/(3 (R'-r')), inside the
    3/(R'-r') budget of the construction.
    """

    def __init__(self, r_in: float, R_out: float, plateau_fraction: float = 1.0 / 16.0,
                 edge_fraction: float = 1.0 / 16.0):
        if not r_in < R_out:
            raise ValueError("cutoff needs r' < R'")
        self.r_in = r_in
        self.R_out = R_out
        self.r0 = 0.5 * (r_in + R_out)
        W = R_out - r_in
        self.delta = plateau_fraction * W
        self.width = 0.5 * W - self.delta  # each ramp's support width
        self.beta = edge_fraction * W / self.width
        if not 0 < self.beta < 0.5:
            raise ValueError("edge fraction too large for the ramp width")

    def _ramp(self, u: np.ndarray) -> np.ndarray:
        """C^2 monotone 0 -> 1 on [0, 1], max slope 1/(1-beta)."""
        b = self.beta
        u = np.clip(u, 0.0, 1.0)
        out = np.empty_like(u)
        lo = u < b
        hi = u > 1.0 - b
        mid = ~lo & ~hi
        out[lo] = b * _smoothstep_integral(u[lo] / b)
        out[mid] = b / 2.0 + (u[mid] - b)
        out[hi] = b / 2.0 + (1.0 - 2.0 * b) + b * (0.5 - _smoothstep_integral((1.0 - u[hi]) / b))
        return out / (1.0 - b)

    def __call__(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.ones_like(t)
        desc = (t > self.r_in) & (t < self.r0 - self.delta)
        out[desc] = 1.0 - self._ramp((t[desc] - self.r_in) / self.width)
        out[(t >= self.r0 - self.delta) & (t <= self.r0 + self.delta)] = 0.0
        asc = (t > self.r0 + self.delta) & (t < self.R_out)
        out[asc] = self._ramp((t[asc] - self.r0 - self.delta) / self.width)
        return out

    def slope_budget(self) -> float:
        return 3.0 / (self.R_out - self.r_in)


@dataclass(frozen=True)
class GlueSpec:
    """Radii, member frames and cutoff sharpness for glue_frames.

    ``inner``/``outer`` are MapZooEntry handles (their differential
    frames are glued) or Frames sampled on the target grid.  ``K``
    bounds the distortion the members must satisfy on the collars
    A(r, r') and A(R', R); None skips the check and reports measured
    values only.
    """

    r: float
    r_prime: float
    R_prime: float
    R: float
    inner: object = None
    outer: object = None
    K: float | None = None
    plateau_fraction: float = 1.0 / 16.0
    edge_fraction: float = 1.0 / 16.0

    def __post_init__(self):
        if not 0 < self.r < self.r_prime < self.R_prime < self.R:
            raise ValueError(
                "glue radii must satisfy 0 < r < r' < R' < R, got "
                f"({self.r}, {self.r_prime}, {self.R_prime}, {self.R})"
            )

    @property
    def r0(self) -> float:
        return 0.5 * (self.r_prime + self.R_prime)

    @property
    def annulus(self) -> Annulus:
        return Annulus(self.r, self.R)


@dataclass(frozen=True)
class GlueResult:
    frame: Frame
    spec: GlueSpec
    cutoff: CutoffProfile
    K_tilde: float
    theta_zero_mask: np.ndarray
    report: dict


def _member_matrix(member, grid: Grid) -> np.ndarray:
    if isinstance(member, MapZooEntry):
        return member.frame(grid).matrix
    if isinstance(member, Frame):
        if member.grid != grid:
            raise ValueError("member frames must live on the gluing grid")
        return member.matrix
    raise TypeError(f"cannot use {type(member)!r} as a glue member")


def glue_frames(spec: GlueSpec, grid: Grid, q: float = 2.0) -> GlueResult:
    """Build the four-piece connecting frame of the collar construction.

    Returns the frame together with the measured distortion bound
    K_tilde (ess-sup over A(r, R) excluding the theta-zero collar) and a
    report with per-collar distortions and the q-energy norm of d(rho).
    """
    if spec.inner is None or spec.outer is None:
        raise ValueError("glue spec needs inner and outer members")
    n = grid.n
    cut = CutoffProfile(spec.r_prime, spec.R_prime, spec.plateau_fraction, spec.edge_fraction)
    r0 = spec.r0

    inner_mat = _member_matrix(spec.inner, grid)
    outer_mat = _member_matrix(spec.outer, grid)
    inner_frame = Frame(grid, inner_mat)
    outer_frame = Frame(grid, outer_mat)

    # member distortion on the required collars (node-fraction tolerance
    # policy, so measure-zero singular sets like a winding axis pass)
    inner_collar = Annulus(spec.r, spec.r_prime)
    outer_collar = Annulus(spec.R_prime, spec.R)
    d_in = distortion(inner_frame, inner_collar)
    d_out = distortion(outer_frame, outer_collar)
    if spec.K is not None:
        if not is_K_qc(inner_frame, spec.K, inner_collar):
            raise ValueError(
                f"inner frame is not {spec.K}-quasiconformal on the collar "
                f"A({spec.r}, {spec.r_prime}): measured ess-sup {d_in.ess_sup:.6g}"
            )
        if not is_K_qc(outer_frame, spec.K, outer_collar):
            raise ValueError(
                f"outer frame is not {spec.K}-quasiconformal on the collar "
                f"A({spec.R_prime}, {spec.R}): measured ess-sup {d_out.ess_sup:.6g}"
            )

    lam0 = RadialMap(
        g=lambda s: (spec.r_prime - spec.r) / (r0 - spec.r) * (s - spec.r) + spec.r,
        gp=lambda s: np.full_like(s, (spec.r_prime - spec.r) / (r0 - spec.r)),
        name="lambda0",
    )
    lam1 = RadialMap(
        g=lambda s: (spec.R - spec.R_prime) / (spec.R - r0) * (s - r0) + spec.R_prime,
        gp=lambda s: np.full_like(s, (spec.R - spec.R_prime) / (spec.R - r0)),
        name="lambda1",
    )
    pull0 = pullback_frame(lam0, spec.inner if isinstance(spec.inner, MapZooEntry) else inner_frame, grid)
    pull1 = pullback_frame(lam1, spec.outer if isinstance(spec.outer, MapZooEntry) else outer_frame, grid)

    s = grid.radii()
    theta = cut(s)
    mat = np.where((s <= spec.r)[..., None, None], inner_mat,
                   np.where((s < r0)[..., None, None], theta[..., None, None] * pull0.matrix,
                            np.where((s < spec.R)[..., None, None],
                                     theta[..., None, None] * pull1.matrix, outer_mat)))
    glued = Frame(grid, mat)

    inside = (s > spec.r) & (s < spec.R)
    theta_zero = inside & (theta <= 1e-14)
    dist_all = distortion(glued, spec.annulus)
    live = inside & ~theta_zero & ~dist_all.degenerate_mask & ~dist_all.infinite_mask
    K_tilde = float(np.max(dist_all.field[live])) if np.any(live) else 1.0

    drho = frame_derivative(glued)
    report = {
        "K_tilde": K_tilde,
        "inner_collar_K": d_in.ess_sup,
        "outer_collar_K": d_out.ess_sup,
        "theta_zero_nodes": int(np.sum(theta_zero)),
        "flagged_infinite_nodes": int(np.sum(dist_all.infinite_mask & ~theta_zero)),
        "drho_q_norm": lp_norm(drho, q, spec.annulus),
        "drho_n_half_norm": lp_norm(drho, n / 2.0),
        "cutoff_slope_budget": cut.slope_budget(),
    }
    return GlueResult(glued, spec, cut, K_tilde, theta_zero, report)
