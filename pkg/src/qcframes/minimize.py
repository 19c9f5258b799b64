"""Constrained q-energy minimization over connecting frames.

The functional is the q-th power norm of the frame derivative,

    E(rho) = int_A |d rho|_2^q,

minimized over frames that agree with the initializer outside the open
annulus and satisfy the distortion constraint |rho|^n <= K J_rho.  The
constraint is handled by a quadratic penalty on the pointwise violation
with multiplier estimates, driven by a geometric weight schedule;
descent uses projected gradients (boundary nodes frozen) with a
Barzilai-Borwein initial step and Armijo backtracking, so accepted
iterates never increase the penalized objective at fixed weights.

Inside this module the frame derivative is discretized on CELL CENTERS
(plaquette circulations built from forward differences and adjacent
averages).  Node-centered central differences are blind to
alternate-ring oscillations, so their q-energy has spurious null modes
through which a minimizer can leak the topological obstruction at zero
discrete cost; the cell form satisfies a telescoping discrete Stokes
identity and keeps the obstruction.  All stationarity diagnostics
(Euler-Lagrange residuals, Caccioppoli) use the same cell derivative so
they measure the energy actually minimized.

Diagnostics on converged minimizers: Euler-Lagrange residuals against a
panel of compactly supported bumps, the Caccioppoli inequality with its
explicit constant, reverse Hoelder ratios on doubled-ball panels, and a
higher-integrability probe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .forms import Frame, lp_average, multi_indices
from .grid import Annulus, Ball, Grid, region_weights

__all__ = [
    "MinimizeRun",
    "energy",
    "qc_violation",
    "objective_and_gradient",
    "minimize",
    "el_residual",
    "RadialBump",
    "TensorBump",
    "bump_panel",
    "ball_panel",
    "caccioppoli_check",
    "caccioppoli_ball_check",
    "reverse_holder_check",
    "higher_integrability_probe",
]


# -- cell-centered frame derivative -------------------------------------------

_OP_CACHE: dict = {}


def _axis_ops(m: int, h: float):
    """Forward difference and adjacent average, both (m-1) x m, sparse."""
    key = (m, h)
    if key not in _OP_CACHE:
        rows = np.repeat(np.arange(m - 1), 2)
        cols = np.ravel(np.column_stack([np.arange(m - 1), np.arange(1, m)]))
        diff = sp.csr_matrix((np.tile([-1.0 / h, 1.0 / h], m - 1), (rows, cols)), shape=(m - 1, m))
        avg = sp.csr_matrix((np.tile([0.5, 0.5], m - 1), (rows, cols)), shape=(m - 1, m))
        _OP_CACHE[key] = (diff, avg)
    return _OP_CACHE[key]


def _apply_axis(values: np.ndarray, op: sp.csr_matrix, axis: int) -> np.ndarray:
    moved = np.moveaxis(values, axis, 0)
    out = op @ moved.reshape(moved.shape[0], -1)
    return np.moveaxis(out.reshape((op.shape[0],) + moved.shape[1:]), 0, axis)


def cell_grid(grid: Grid) -> Grid:
    """Grid of cell centers (one fewer node per axis)."""
    h = grid.spacing
    return Grid(tuple(d - 1 for d in grid.dims),
                tuple(o + h / 2.0 for o in grid.origin), h)


def _cell_ops(grid: Grid, axis: int, kind: str, transpose: bool = False):
    diff, avg = _axis_ops(grid.dims[axis], grid.spacing)
    op = diff if kind == "d" else avg
    return op.T if transpose else op


def cell_curl_component(comp_k: np.ndarray, comp_j: np.ndarray, grid: Grid,
                        j: int, k: int) -> np.ndarray:
    """(d omega)_{jk} at cell centers: D_j A_rest omega_k - D_k A_rest omega_j."""
    n = grid.n
    out_k = comp_k
    out_j = comp_j
    for ax in range(n):
        kind_k = "d" if ax == j else "a"
        kind_j = "d" if ax == k else "a"
        out_k = _apply_axis(out_k, _cell_ops(grid, ax, kind_k), ax)
        out_j = _apply_axis(out_j, _cell_ops(grid, ax, kind_j), ax)
    return out_k - out_j


def cell_frame_derivative(matrix: np.ndarray, grid: Grid) -> np.ndarray:
    """d(rho) on cell centers: (n, C(n,2)) components per cell."""
    n = grid.n
    pairs = multi_indices(n, 2)
    cells = tuple(d - 1 for d in grid.dims)
    out = np.empty((n, len(pairs)) + cells)
    for i in range(n):
        for c, (j, k) in enumerate(pairs):
            out[i, c] = cell_curl_component(matrix[..., i, k], matrix[..., i, j], grid, j, k)
    return out


def cell_frame_derivative_adjoint(cotangent: np.ndarray, grid: Grid) -> np.ndarray:
    """Adjoint of cell_frame_derivative, back to node matrix entries."""
    n = grid.n
    pairs = multi_indices(n, 2)
    out = np.zeros(grid.dims + (n, n))
    for i in range(n):
        for c, (j, k) in enumerate(pairs):
            back_k = cotangent[i, c]
            back_j = cotangent[i, c]
            for ax in reversed(range(n)):
                kind_k = "d" if ax == j else "a"
                kind_j = "d" if ax == k else "a"
                back_k = _apply_axis(back_k, _cell_ops(grid, ax, kind_k, transpose=True), ax)
                back_j = _apply_axis(back_j, _cell_ops(grid, ax, kind_j, transpose=True), ax)
            out[..., i, k] += back_k
            out[..., i, j] -= back_j
    return out


# -- energy and constraint ----------------------------------------------------


def _hs_sq(coeffs: np.ndarray, n: int) -> np.ndarray:
    """|X|_2^2 from stacked coefficients (n, C, ...)."""
    return np.sum(coeffs**2, axis=(0, 1)) / n


def energy(rho: Frame, q: float, region=None) -> float:
    """int over region of |d rho|_2^q with the cell-centered derivative."""
    cg = cell_grid(rho.grid)
    w = region_weights(cg, region)
    S = _hs_sq(cell_frame_derivative(rho.matrix, rho.grid), rho.n)
    return float(np.sum(w * S ** (q / 2.0)) * cg.cell_volume())


def _sigma_max(matrix: np.ndarray) -> np.ndarray:
    MtM = np.einsum("...ij,...ik->...jk", matrix, matrix)
    ev = np.linalg.eigvalsh(MtM)
    return np.sqrt(np.maximum(ev[..., -1], 0.0))


def _cofactor(matrix: np.ndarray) -> np.ndarray:
    """d(det M)/dM, vectorized for 2x2 and 3x3 matrix stacks."""
    n = matrix.shape[-1]
    out = np.empty_like(matrix)
    if n == 2:
        out[..., 0, 0] = matrix[..., 1, 1]
        out[..., 0, 1] = -matrix[..., 1, 0]
        out[..., 1, 0] = -matrix[..., 0, 1]
        out[..., 1, 1] = matrix[..., 0, 0]
        return out
    for i in range(3):
        for j in range(3):
            r = [k for k in range(3) if k != i]
            c = [k for k in range(3) if k != j]
            minor = (matrix[..., r[0], c[0]] * matrix[..., r[1], c[1]]
                     - matrix[..., r[0], c[1]] * matrix[..., r[1], c[0]])
            out[..., i, j] = (-1.0) ** (i + j) * minor
    return out


def _violation_field(matrix: np.ndarray, K: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(positive part g+, sigma_max, det) of g = |rho|^n - K J."""
    n = matrix.shape[-1]
    sig = _sigma_max(matrix)
    det = np.linalg.det(matrix)
    g = sig**n - K * det
    return np.maximum(g, 0.0), sig, det


def qc_violation(rho: Frame, K: float, region=None) -> float:
    """Penalty functional: int of max(|rho|^n - K J_rho, 0)^2; zero iff
    the distortion inequality holds nodewise on the region."""
    w = region_weights(rho.grid, region)
    gplus, _, _ = _violation_field(rho.matrix, K)
    return float(np.sum(w * gplus**2) * rho.grid.cell_volume())


def exterior_derivative_adjoint(cotangent: np.ndarray, grid: Grid, degree_in: int) -> np.ndarray:
    """Adjoint of the coefficient map of exterior_derivative.

    cotangent has the output layout (C(n, degree_in + 1), dims);
    returns arrays in the input layout (C(n, degree_in), dims).
    """
    n = grid.n
    in_idx = multi_indices(n, degree_in)
    out_idx = multi_indices(n, degree_in + 1)
    out = np.zeros((len(in_idx),) + grid.dims)
    for ci, I in enumerate(in_idx):
        for j in range(n):
            if j in I:
                continue
            J = tuple(sorted(I + (j,)))
            sign = (-1) ** J.index(j)
            out[ci] += sign * partial_derivative(cotangent[out_idx.index(J)], grid, j, transpose=True)
    return out


def objective_and_gradient(matrix: np.ndarray, grid: Grid, q: float, K: float,
                           mu: float, w: np.ndarray, eps: float,
                           lam: np.ndarray | None = None,
                           want_gradient: bool = True):
    """Penalized objective and its gradient in the frame-matrix entries.

    With ``lam`` None this is the plain quadratic penalty
    F = E_smooth + mu V; with a multiplier field lam >= 0 it is the
    augmented form E_smooth + sum W [max(lam + mu g, 0)^2 - lam^2]/(2 mu)
    whose g-derivative is W max(lam + mu g, 0).  ``eps`` is the energy
    smoothing width (0 for q >= 2).  Returns (objective, raw E, V, grad).
    """
    n = grid.n
    rho = Frame(grid, matrix)
    G = _frame_d_coeffs(rho)
    S = _hs_sq(G, n)
    vol = grid.cell_volume()
    Seps = S + eps * eps
    E_smooth = float(np.sum(w * Seps ** (q / 2.0)) * vol)
    E_raw = float(np.sum(w * S ** (q / 2.0)) * vol)
    gplus, sig, det = _violation_field(matrix, K)
    g = sig**n - K * det
    V = float(np.sum(w * gplus**2) * vol)
    if lam is None:
        F = E_smooth + mu * V
        force = 2.0 * mu * gplus  # dF/dg per unit weight
        active = gplus > 0
    else:
        shifted = np.maximum(lam + mu * g, 0.0)
        F = E_smooth + float(np.sum(w * (shifted**2 - lam**2)) * vol) / (2.0 * mu)
        force = shifted
        active = shifted > 0
    if not want_gradient:
        return F, E_raw, V, None

    # energy part: dE/dG = (q/n) w S_eps^{(q-2)/2} G, then adjoint of d
    factor = (q / n) * (w * Seps ** ((q - 2.0) / 2.0)) * vol
    grad = np.zeros_like(matrix)
    for i in range(n):
        back = exterior_derivative_adjoint(factor * G[i], grid, 1)
        grad[..., i, :] += np.moveaxis(back, 0, -1)

    # constraint part: dg/dM = n sig^{n-1} u1 v1^T - K cof(M)
    active &= w > 0
    if np.any(active):
        Mv = matrix[active]
        u, s, vt = np.linalg.svd(Mv)
        duv = u[:, :, 0][:, :, None] * vt[:, 0, :][:, None, :]
        dg = n * s[:, 0][:, None, None] ** (n - 1) * duv - K * _cofactor(Mv)
        grad[active] += (w[active] * force[active])[:, None, None] * vol * dg
    return F, E_raw, V, grad


@dataclass
class MinimizeRun:
    """Configuration and iterate history for one minimization.

    Free degrees of freedom are the frame entries at nodes strictly
    inside the annulus; everything else stays bitwise equal to the
    initial frame.
    """

    q: float
    K: float
    annulus: Annulus
    initial: Frame
    mu0: float = 10.0
    mu_growth: float = 10.0
    mu_max: float = 1e12
    max_iterations: int = 2000
    armijo_c: float = 1e-4
    max_backtracks: int = 40
    stall_window: int = 50
    stall_rel: float = 1e-8
    feasibility_rel: float = 1e-8
    step_policy: str = "bb"
    history: list = field(default_factory=list)

    def __post_init__(self):
        n = self.initial.grid.n
        if not self.q > n / 2.0:
            raise ValueError(f"exponent q must exceed n/2 = {n / 2}, got {self.q}")
        if self.K < 1.0:
            raise ValueError(f"distortion bound K must be >= 1, got {self.K}")
        if self.step_policy not in ("bb", "fixed"):
            raise ValueError(f"unknown step policy {self.step_policy!r}")


def _free_mask(grid: Grid, annulus: Annulus) -> np.ndarray:
    s = grid.radii()
    return (s > annulus.r) & (s < annulus.R)


def minimize(run: MinimizeRun) -> tuple[Frame, dict]:
    """Penalized projected descent; returns the final frame and a report.

    Stages of monotone BB-Armijo descent on the augmented penalty
    objective alternate with multiplier updates; the penalty weight
    grows geometrically whenever the worst constraint violation fails
    to shrink between stages.  Terminates when the energy decrease over
    ``stall_window`` accepted iterates falls below ``stall_rel``
    relative and the violation is below ``feasibility_rel`` of the
    energy scale.
    """
    grid = run.initial.grid
    w = region_weights(grid, run.annulus)
    free = _free_mask(grid, run.annulus)[..., None, None] & np.ones(
        (grid.n, grid.n), dtype=bool)

    x = run.initial.matrix.copy()
    eps = 0.0
    if run.q < 2.0:
        eps = 1e-8 * lp_average(frame_derivative(run.initial), 2.0, run.annulus)

    mu = run.mu0
    lam = np.zeros(grid.dims)

    def evaluate(mat, want_gradient=True):
        out = objective_and_gradient(mat, grid, run.q, run.K, mu, w, eps,
                                     lam=lam, want_gradient=want_gradient)
        if want_gradient:
            F, E, V, grad = out
            if not np.all(np.isfinite(grad)):
                raise ValueError("non-finite gradient")
            grad[~free] = 0.0
            return F, E, V, grad
        return out

    F, E, V, grad = evaluate(x)
    if V > max(1e-6 * max(1.0, E), 1e-12):
        raise ValueError(
            f"initial frame is infeasible: qc_violation {V:.3e} vs energy {E:.3e}"
        )

    run.history.clear()
    run.history.append({"iteration": 0, "energy": E, "violation": V,
                        "objective": F, "mu": mu, "step": 0.0})
    alpha = 1.0
    x_prev = None
    g_prev = None
    stage_energies = [E]
    sup_violation_prev = None
    converged = False
    message = "iteration budget exhausted"
    it = 0

    def stage_update() -> bool:
        """Multiplier / penalty-weight update; False when mu is exhausted."""
        nonlocal mu, lam, F, E, V, grad, x_prev, g_prev, stage_energies, sup_violation_prev
        gplus, sig, det = _violation_field(x, run.K)
        g = sig**grid.n - run.K * det
        sup = float(np.max(gplus * (w > 0)))
        lam = np.maximum(lam + mu * g, 0.0)
        if sup_violation_prev is not None and sup > 0.1 * sup_violation_prev:
            if mu * run.mu_growth > run.mu_max:
                return False
            mu *= run.mu_growth
        sup_violation_prev = sup
        F, E, V, grad = evaluate(x)
        x_prev = g_prev = None
        stage_energies = [E]
        return True

    while it < run.max_iterations:
        it += 1
        if run.step_policy == "bb" and x_prev is not None:
            sdiff = (x - x_prev)[free]
            ydiff = (grad - g_prev)[free]
            sy = float(sdiff @ ydiff)
            alpha = float(sdiff @ sdiff) / sy if sy > 0 else alpha * 2.0
            alpha = min(max(alpha, 1e-12), 1e6)
        gnorm2 = float(np.sum(grad[free] ** 2))
        if gnorm2 == 0.0:
            converged = V <= run.feasibility_rel * max(1.0, E)
            message = "zero projected gradient"
            break

        accepted = False
        a = alpha
        for _ in range(run.max_backtracks):
            x_try = x.copy()
            x_try[free] -= a * grad[free]
            F_try, _, _, _ = evaluate(x_try, want_gradient=False)
            if F_try <= F - run.armijo_c * a * gnorm2:
                accepted = True
                break
            a *= 0.5

        strict_stall = loose_stall = False
        if accepted:
            x_prev, g_prev = x, grad
            x = x_try
            F, E, V, grad = evaluate(x)
            alpha = a
            stage_energies.append(E)
            run.history.append({"iteration": it, "energy": E, "violation": V,
                                "objective": F, "mu": mu, "step": a})
            if len(stage_energies) > run.stall_window:
                past = stage_energies[-run.stall_window - 1]
                strict_stall = (past - E) < run.stall_rel * max(abs(past), 1e-30)
            # cheap inner tolerance while the multipliers are still moving
            loose_win = max(run.stall_window // 2, 10)
            if len(stage_energies) > loose_win:
                past = stage_energies[-loose_win - 1]
                loose_stall = (past - E) < 1e-6 * max(abs(past), 1e-30)
            if len(stage_energies) > 10 * run.stall_window:
                loose_stall = True  # cap stage length
        else:
            strict_stall = loose_stall = True  # no descent step at this stage

        feasible = V <= run.feasibility_rel * max(1.0, E)
        if feasible and strict_stall:
            converged = True
            message = "energy stalled, feasibility satisfied"
            break
        if not feasible and loose_stall:
            if not stage_update():
                message = "penalty weight exceeded mu_max while infeasible"
                break

    polished = False
    if converged and run.q == 2.0 and float(np.max(lam)) <= 1e-12:
        # with an inactive constraint the q = 2 energy is a plain
        # quadratic in the free entries; conjugate gradients drive the
        # projected gradient to machine level, which the stall test
        # cannot do in flat directions
        x_new = _cg_polish_q2(x, grid, w, free)
        _, E_new, V_new, _ = objective_and_gradient(
            x_new, grid, run.q, run.K, mu, w, eps, lam=lam, want_gradient=False)
        if E_new <= E + 1e-15 and V_new <= run.feasibility_rel * max(1.0, E_new):
            x, E, V, polished = x_new, E_new, V_new, True
            run.history.append({"iteration": it, "energy": E, "violation": V,
                                "objective": E, "mu": mu, "step": "cg-polish"})

    final = Frame(grid, x)
    report = {
        "converged": converged,
        "message": message,
        "iterations": it,
        "energy": E,
        "qc_violation": V,
        "mu_final": mu,
        "smoothing_eps": eps,
        "energy_initial": run.history[0]["energy"],
        "cg_polished": polished,
    }
    return final, report


def _cg_polish_q2(x0: np.ndarray, grid: Grid, w: np.ndarray, free: np.ndarray,
                  rtol: float = 1e-13, maxiter: int = 3000) -> np.ndarray:
    """Solve the free-node normal equations of the q = 2 energy exactly.

    grad E(x) = (2/n) adj(w vol d x) is linear in x; CG on the free
    entries with the fixed boundary data folded into the right side.
    """
    n = grid.n
    vol = grid.cell_volume()

    def grad_of(mat):
        G = _frame_d_coeffs(Frame(grid, mat))
        factor = (2.0 / n) * w * vol
        out = np.zeros_like(mat)
        for i in range(n):
            back = exterior_derivative_adjoint(factor * G[i], grid, 1)
            out[..., i, :] += np.moveaxis(back, 0, -1)
        return out

    def matvec(vec_free):
        z = np.zeros_like(x0)
        z[free] = vec_free
        return grad_of(z)[free]

    b = -grad_of(x0)[free]
    xk = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    b_norm = np.sqrt(rs)
    if b_norm == 0.0:
        return x0
    for _ in range(maxiter):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            break
        a = rs / pAp
        xk += a * p
        r -= a * Ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= rtol * b_norm:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    out = x0.copy()
    out[free] += xk
    return out


# -- test functions and ball panels -------------------------------------------


class RadialBump:
    """h(x) = beta((|x| - a)/width) with beta(u) = (1 - u^2)^3: C^2,
    supported on the sub-annulus a - width < |x| < a + width."""

    def __init__(self, a: float, width: float):
        self.a = a
        self.width = width

    def __call__(self, points: np.ndarray) -> np.ndarray:
        s = np.linalg.norm(np.atleast_2d(points), axis=-1)
        u = (s - self.a) / self.width
        return np.where(np.abs(u) < 1.0, (1.0 - u**2) ** 3, 0.0)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        s = np.maximum(np.linalg.norm(p, axis=-1), 1e-300)
        u = (s - self.a) / self.width
        db = np.where(np.abs(u) < 1.0, -6.0 * u * (1.0 - u**2) ** 2, 0.0)
        return (db / self.width / s)[:, None] * p

    def support_interval(self) -> tuple[float, float]:
        return self.a - self.width, self.a + self.width


class TensorBump:
    """h(x) = prod_k beta((x_k - c_k)/width): C^2 cube bump."""

    def __init__(self, center, width: float):
        self.center = np.asarray(center, dtype=float)
        self.width = width

    def _beta(self, u):
        return np.where(np.abs(u) < 1.0, (1.0 - u**2) ** 3, 0.0)

    def _dbeta(self, u):
        return np.where(np.abs(u) < 1.0, -6.0 * u * (1.0 - u**2) ** 2, 0.0)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        u = (np.atleast_2d(points) - self.center) / self.width
        return np.prod(self._beta(u), axis=-1)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        u = (p - self.center) / self.width
        b = self._beta(u)
        db = self._dbeta(u) / self.width
        out = np.empty_like(p)
        for k in range(p.shape[1]):
            others = np.prod(np.delete(b, k, axis=1), axis=1)
            out[:, k] = db[:, k] * others
        return out


def bump_panel(annulus: Annulus, n: int, count: int = 10) -> list:
    """Panel of compactly supported C^2 test functions inside the annulus:
    radial sub-annulus bumps plus tensor bumps at off-center points."""
    r, R = annulus.r, annulus.R
    mid = 0.5 * (r + R)
    gap = R - r
    panel = []
    n_radial = max(count // 2, 2)
    for i in range(n_radial):
        a = r + gap * (0.3 + 0.4 * i / max(n_radial - 1, 1))
        width = 0.9 * min(a - r, R - a)
        panel.append(RadialBump(a, width))
    k = 0
    while len(panel) < count:
        angle = 2.0 * np.pi * k / max(count - n_radial, 1)
        if n == 2:
            c = mid * np.array([np.cos(angle), np.sin(angle)])
        else:
            zlift = 0.2 * gap * np.cos(3.0 * angle)
            c = np.array([mid * np.cos(angle), mid * np.sin(angle), zlift])
        width = 0.9 * min(np.linalg.norm(c) - r, R - np.linalg.norm(c)) / np.sqrt(n)
        panel.append(TensorBump(c, width))
        k += 1
    return panel


def ball_panel(annulus: Annulus, n: int, count: int = 20, seed: int = 0) -> list[Ball]:
    """Balls with doubled closure inside the annulus."""
    rng = np.random.default_rng(seed)
    r, R = annulus.r, annulus.R
    balls = []
    while len(balls) < count:
        a = rng.uniform(r + 0.15 * (R - r), R - 0.15 * (R - r))
        smax = min(a - r, R - a) / 2.0
        s = rng.uniform(0.4, 0.9) * smax
        u = rng.standard_normal(n)
        u /= np.linalg.norm(u)
        balls.append(Ball(s, tuple(a * u)))
    return balls


def _check_support_inside(h, annulus: Annulus, grid: Grid):
    if isinstance(h, RadialBump):
        lo, hi = h.support_interval()
        if lo <= annulus.r or hi >= annulus.R:
            raise ValueError(
                f"bump support ({lo:.4g}, {hi:.4g}) is not inside A({annulus.r}, {annulus.R})"
            )
        return
    vals = h(grid.nodes()).reshape(grid.dims)
    s = grid.radii()
    outside = (s <= annulus.r) | (s >= annulus.R)
    if np.any(vals[outside] != 0.0):
        raise ValueError("test function support is not inside the annulus")


# -- minimizer diagnostics ------------------------------------------------------


def el_residual(rho: Frame, q: float, annulus: Annulus, h) -> float:
    """Normalized stationarity defect against one test function:

    | int < |d rho|^{q-2} d rho, d(h rho) > |  /  (||d rho||_q^{q-1} ||d(h rho)||_q),

    with the Hilbert-Schmidt pairing; both derivative factors use the
    grid stencils, so this is the directional derivative of the
    discrete energy along the conformal variation h rho (scaled by q).
    """
    grid = rho.grid
    n = grid.n
    _check_support_inside(h, annulus, grid)
    w = region_weights(grid, annulus)
    vol = grid.cell_volume()

    G = _frame_d_coeffs(rho)
    S = _hs_sq(G, n)
    hv = h(grid.nodes()).reshape(grid.dims)
    h_rho = Frame(grid, hv[..., None, None] * rho.matrix)
    Gh = _frame_d_coeffs(h_rho)

    with np.errstate(all="ignore"):
        weight = np.where(S > 0.0, S ** ((q - 2.0) / 2.0), 0.0)
    pairing = np.sum(G * Gh, axis=(0, 1)) / n
    T = float(np.sum(w * weight * pairing) * vol)

    drho_q = float(np.sum(w * S ** (q / 2.0)) * vol) ** (1.0 / q)
    Sh = _hs_sq(Gh, n)
    dh_q = float(np.sum(w * Sh ** (q / 2.0)) * vol) ** (1.0 / q)
    denom = drho_q ** (q - 1.0) * dh_q
    if denom < 1e-300:
        return 0.0
    return abs(T) / denom


def caccioppoli_check(rho: Frame, q: float, annulus: Annulus, h,
                      slack: float = 0.05) -> tuple[float, float, bool]:
    """Test-function form with explicit constant q:

    (int |d rho|_2^q h^q)^{1/q}  <=  q (int |rho|_2^q |dh|^q)^{1/q}.
    """
    grid = rho.grid
    _check_support_inside(h, annulus, grid)
    w = region_weights(grid, annulus)
    vol = grid.cell_volume()
    n = grid.n

    S = _hs_sq(_frame_d_coeffs(rho), n)
    hv = np.maximum(h(grid.nodes()).reshape(grid.dims), 0.0)
    lhs = float(np.sum(w * S ** (q / 2.0) * hv**q) * vol) ** (1.0 / q)

    rho_hs = np.sqrt(np.sum(rho.matrix**2, axis=(-2, -1)) / n)
    dh = np.linalg.norm(h.gradient(grid.nodes()), axis=-1).reshape(grid.dims)
    rhs = q * float(np.sum(w * rho_hs**q * dh**q) * vol) ** (1.0 / q)
    return lhs, rhs, lhs <= (1.0 + slack) * rhs


def caccioppoli_ball_check(rho: Frame, q: float, annulus: Annulus, ball: Ball,
                           slack: float = 0.05) -> tuple[float, float, bool]:
    """Ball form: [d rho]_{q,B} <= (2q/s) [rho]_{q,2B} for 2B inside A."""
    _require_doubled_inside(ball, annulus)
    drho = frame_derivative(rho)
    lhs = lp_average(drho, q, ball)
    rhs = (2.0 * q / ball.radius) * lp_average(rho, q, ball.doubled())
    return lhs, rhs, lhs <= (1.0 + slack) * rhs


def _require_doubled_inside(ball: Ball, annulus: Annulus):
    a = np.linalg.norm(np.asarray(ball.center))
    if a - 2.0 * ball.radius <= annulus.r or a + 2.0 * ball.radius >= annulus.R:
        raise ValueError(f"doubled ball 2B of {ball} is not inside A({annulus.r}, {annulus.R})")


def reverse_holder_check(rho: Frame, q: float, annulus: Annulus,
                         balls: list[Ball]) -> dict:
    """Ratio [rho]_{n,B}^n / [rho]_{max(n-1,q),2B}^n per panel ball; the
    max ratio is the empirical constant."""
    if not balls:
        raise ValueError("reverse Hoelder check needs a non-empty ball panel")
    n = rho.grid.n
    p_hi = max(n - 1.0, q)
    rows = []
    for B in balls:
        _require_doubled_inside(B, annulus)
        lhs = lp_average(rho, float(n), B) ** n
        rhs = lp_average(rho, p_hi, B.doubled()) ** n
        rows.append({"ball": B, "lhs": lhs, "rhs": rhs,
                     "ratio": lhs / rhs if rhs > 0 else np.inf})
    return {"rows": rows, "max_ratio": max(r["ratio"] for r in rows)}


def higher_integrability_probe(rho: Frame, annulus: Annulus, balls: list[Ball],
                               p_values: tuple | None = None) -> dict:
    """Ratios [rho]_{p,B} / [rho]_{n,2B} for p just above n."""
    n = rho.grid.n
    if p_values is None:
        p_values = (n + 0.25, n + 0.5, n + 1.0)
    table = {}
    for p in p_values:
        ratios = []
        for B in balls:
            _require_doubled_inside(B, annulus)
            num = lp_average(rho, p, B)
            den = lp_average(rho, float(n), B.doubled())
            ratios.append(num / den if den > 0 else np.inf)
        table[p] = {"max_ratio": max(ratios), "mean_ratio": float(np.mean(ratios))}
    return table
