"""Hot numerical loops, JIT-compiled when numba is available.

The homotopy-operator kernels accumulate, for every grid node x inside
an index box, the weighted sum over parameter pairs (t, y) of the
contracted, interpolated form values along the segment y -> x.  Each
output node is written by exactly one thread, so results do not depend
on the thread schedule.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return wrap

    prange = range


@njit(parallel=True, fastmath=True, cache=True)
def homotopy_pairs_3d(coeffs, origin, h, start, bshape,
                      yc, W, t, term_cout, term_j, term_cin, term_sign, n_out):
    C_in, d0, d1, d2 = coeffs.shape
    P = yc.shape[0]
    T = term_cout.shape[0]
    b0, b1, b2 = bshape[0], bshape[1], bshape[2]
    out = np.zeros((n_out, b0, b1, b2))
    for i0 in prange(b0):
        v = np.zeros(C_in)
        acc = np.zeros(n_out)
        u = np.zeros(3)
        x0 = origin[0] + (start[0] + i0) * h
        for i1 in range(b1):
            x1 = origin[1] + (start[1] + i1) * h
            for i2 in range(b2):
                x2 = origin[2] + (start[2] + i2) * h
                for c in range(n_out):
                    acc[c] = 0.0
                for p in range(P):
                    tq = t[p]
                    u[0] = x0 - yc[p, 0]
                    u[1] = x1 - yc[p, 1]
                    u[2] = x2 - yc[p, 2]
                    g0 = (yc[p, 0] + tq * u[0] - origin[0]) / h
                    g1 = (yc[p, 1] + tq * u[1] - origin[1]) / h
                    g2 = (yc[p, 2] + tq * u[2] - origin[2]) / h
                    if g0 < 0.0:
                        g0 = 0.0
                    elif g0 > d0 - 1:
                        g0 = d0 - 1.0
                    if g1 < 0.0:
                        g1 = 0.0
                    elif g1 > d1 - 1:
                        g1 = d1 - 1.0
                    if g2 < 0.0:
                        g2 = 0.0
                    elif g2 > d2 - 1:
                        g2 = d2 - 1.0
                    l0 = int(g0)
                    if l0 > d0 - 2:
                        l0 = d0 - 2
                    l1 = int(g1)
                    if l1 > d1 - 2:
                        l1 = d1 - 2
                    l2 = int(g2)
                    if l2 > d2 - 2:
                        l2 = d2 - 2
                    f0 = g0 - l0
                    f1 = g1 - l1
                    f2 = g2 - l2
                    w00 = (1.0 - f1) * (1.0 - f2)
                    w01 = (1.0 - f1) * f2
                    w10 = f1 * (1.0 - f2)
                    w11 = f1 * f2
                    for c in range(C_in):
                        a = coeffs[c]
                        p0 = (a[l0, l1, l2] * w00 + a[l0, l1, l2 + 1] * w01
                              + a[l0, l1 + 1, l2] * w10 + a[l0, l1 + 1, l2 + 1] * w11)
                        p1 = (a[l0 + 1, l1, l2] * w00 + a[l0 + 1, l1, l2 + 1] * w01
                              + a[l0 + 1, l1 + 1, l2] * w10 + a[l0 + 1, l1 + 1, l2 + 1] * w11)
                        v[c] = (1.0 - f0) * p0 + f0 * p1
                    wp = W[p]
                    for k in range(T):
                        acc[term_cout[k]] += (wp * term_sign[k]
                                              * u[term_j[k]] * v[term_cin[k]])
                for c in range(n_out):
                    out[c, i0, i1, i2] = acc[c]
    return out


@njit(parallel=True, fastmath=True, cache=True)
def homotopy_pairs_2d(coeffs, origin, h, start, bshape,
                      yc, W, t, term_cout, term_j, term_cin, term_sign, n_out):
    C_in, d0, d1 = coeffs.shape
    P = yc.shape[0]
    T = term_cout.shape[0]
    b0, b1 = bshape[0], bshape[1]
    out = np.zeros((n_out, b0, b1))
    for i0 in prange(b0):
        v = np.zeros(C_in)
        acc = np.zeros(n_out)
        u = np.zeros(2)
        x0 = origin[0] + (start[0] + i0) * h
        for i1 in range(b1):
            x1 = origin[1] + (start[1] + i1) * h
            for c in range(n_out):
                acc[c] = 0.0
            for p in range(P):
                tq = t[p]
                u[0] = x0 - yc[p, 0]
                u[1] = x1 - yc[p, 1]
                g0 = (yc[p, 0] + tq * u[0] - origin[0]) / h
                g1 = (yc[p, 1] + tq * u[1] - origin[1]) / h
                if g0 < 0.0:
                    g0 = 0.0
                elif g0 > d0 - 1:
                    g0 = d0 - 1.0
                if g1 < 0.0:
                    g1 = 0.0
                elif g1 > d1 - 1:
                    g1 = d1 - 1.0
                l0 = int(g0)
                if l0 > d0 - 2:
                    l0 = d0 - 2
                l1 = int(g1)
                if l1 > d1 - 2:
                    l1 = d1 - 2
                f0 = g0 - l0
                f1 = g1 - l1
                for c in range(C_in):
                    a = coeffs[c]
                    v[c] = ((1.0 - f0) * ((1.0 - f1) * a[l0, l1] + f1 * a[l0, l1 + 1])
                            + f0 * ((1.0 - f1) * a[l0 + 1, l1] + f1 * a[l0 + 1, l1 + 1]))
                wp = W[p]
                for k in range(T):
                    acc[term_cout[k]] += wp * term_sign[k] * u[term_j[k]] * v[term_cin[k]]
            for c in range(n_out):
                out[c, i0, i1] = acc[c]
    return out


@njit(parallel=True, fastmath=True, cache=True)
def solid_angle_sweep(verts, faces, targets):
    """Sum of signed solid angles of mesh triangles seen from each target.

    verts (V, 3) are mapped boundary points, faces (F, 3) vertex ids,
    targets (M, 3).  Returns (M,) sums; degree = sum / (4 pi).
    """
    M = targets.shape[0]
    F = faces.shape[0]
    out = np.zeros(M)
    for m in prange(M):
        tx = targets[m, 0]
        ty = targets[m, 1]
        tz = targets[m, 2]
        total = 0.0
        for f in range(F):
            ax = verts[faces[f, 0], 0] - tx
            ay = verts[faces[f, 0], 1] - ty
            az = verts[faces[f, 0], 2] - tz
            bx = verts[faces[f, 1], 0] - tx
            by = verts[faces[f, 1], 1] - ty
            bz = verts[faces[f, 1], 2] - tz
            cx = verts[faces[f, 2], 0] - tx
            cy = verts[faces[f, 2], 1] - ty
            cz = verts[faces[f, 2], 2] - tz
            la = np.sqrt(ax * ax + ay * ay + az * az)
            lb = np.sqrt(bx * bx + by * by + bz * bz)
            lc = np.sqrt(cx * cx + cy * cy + cz * cz)
            triple = (ax * (by * cz - bz * cy)
                      - ay * (bx * cz - bz * cx)
                      + az * (bx * cy - by * cx))
            denom = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
                     + (ax * cx + ay * cy + az * cz) * lb
                     + (bx * cx + by * cy + bz * cz) * la)
            total += 2.0 * np.arctan2(triple, denom)
        out[m] = total
    return out


@njit(parallel=True, fastmath=True, cache=True)
def winding_sweep_2d(loop, targets):
    """Total signed angle of a closed polyline around each target.

    loop (B, 2) sampled boundary image (closed implicitly), targets
    (M, 2).  Returns (M,) angle sums; winding number = sum / (2 pi).
    """
    M = targets.shape[0]
    B = loop.shape[0]
    out = np.zeros(M)
    for m in prange(M):
        tx = targets[m, 0]
        ty = targets[m, 1]
        total = 0.0
        px = loop[B - 1, 0] - tx
        py = loop[B - 1, 1] - ty
        for b in range(B):
            qx = loop[b, 0] - tx
            qy = loop[b, 1] - ty
            cross = px * qy - py * qx
            dot = px * qx + py * qy
            total += np.arctan2(cross, dot)
            px = qx
            py = qy
        out[m] = total
    return out


def homotopy_pairs_numpy(coeffs, origin, h, start, bshape, yc, W, t,
                         term_cout, term_j, term_cin, term_sign, n_out):
    """Pure-numpy fallback mirroring homotopy_pairs_2d/3d (slower)."""
    n = yc.shape[1]
    dims = coeffs.shape[1:]
    axes = [origin[k] + h * (start[k] + np.arange(bshape[k])) for k in range(n)]
    mg = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mg], axis=-1)
    out = np.zeros((n_out,) + pts.shape[:1])
    for p in range(yc.shape[0]):
        u = pts - yc[p]
        z = yc[p] + t[p] * u
        gidx = [(z[:, k] - origin[k]) / h for k in range(n)]
        vals = np.zeros((coeffs.shape[0], pts.shape[0]))
        lo, fr = [], []
        for k in range(n):
            g = np.clip(gidx[k], 0.0, dims[k] - 1)
            i = np.minimum(g.astype(np.int64), dims[k] - 2)
            lo.append(i)
            fr.append(g - i)
        for corner in range(2**n):
            w = np.ones(pts.shape[0])
            idx = []
            for k in range(n):
                if corner >> k & 1:
                    w = w * fr[k]
                    idx.append(lo[k] + 1)
                else:
                    w = w * (1.0 - fr[k])
                    idx.append(lo[k])
            vals += w * coeffs[(slice(None),) + tuple(idx)]
        for k in range(term_cout.shape[0]):
            out[term_cout[k]] += (W[p] * term_sign[k]
                                  * u[:, term_j[k]] * vals[term_cin[k]])
    return out.reshape((n_out,) + tuple(bshape))
