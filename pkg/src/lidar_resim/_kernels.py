"""Fused trilinear gather/scatter kernels for the grid hot paths.

The jitted variants fuse clamping, cell location, weight computation and the
corner gather into one pass; scatters stay single-threaded so gradient
accumulation is deterministic.  The six-probe gradient stencil gets its own
fused kernels since it dominates training cost.  Set LIDAR_RESIM_NO_NUMBA=1
to force the pure-NumPy fallbacks (results agree to rounding).
"""

from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("LIDAR_RESIM_NO_NUMBA", "") == ""
if USE_NUMBA:
    try:
        from numba import njit, prange
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

if not USE_NUMBA:
    def njit(*args, **kwargs):  # pragma: no cover
        def wrap(fn):
            return fn
        return wrap

    prange = range


@njit(parallel=True, cache=True)
def _sdf_only_nb(pts, lo, hi, cell, ny, nz, lx, ly, lz, sdf_flat, out):
    step_x = ny * nz
    for i in prange(pts.shape[0]):
        x = pts[i, 0]
        y = pts[i, 1]
        z = pts[i, 2]
        cx = min(max(x, lo[0]), hi[0])
        cy = min(max(y, lo[1]), hi[1])
        cz = min(max(z, lo[2]), hi[2])
        dx = x - cx
        dy = y - cy
        dz = z - cz
        gx = (cx - lo[0]) / cell[0]
        gy = (cy - lo[1]) / cell[1]
        gz = (cz - lo[2]) / cell[2]
        ix = min(int(gx), lx)
        iy = min(int(gy), ly)
        iz = min(int(gz), lz)
        u = gx - ix
        v = gy - iy
        w = gz - iz
        base = ix * step_x + iy * nz + iz
        v00 = (1 - w) * sdf_flat[base] + w * sdf_flat[base + 1]
        v01 = (1 - w) * sdf_flat[base + nz] + w * sdf_flat[base + nz + 1]
        v10 = (1 - w) * sdf_flat[base + step_x] + w * sdf_flat[base + step_x + 1]
        v11 = ((1 - w) * sdf_flat[base + step_x + nz]
               + w * sdf_flat[base + step_x + nz + 1])
        val = (1 - u) * ((1 - v) * v00 + v * v01) + u * ((1 - v) * v10 + v * v11)
        out[i] = val + np.sqrt(dx * dx + dy * dy + dz * dz)


@njit(parallel=True, cache=True)
def _interp_full_nb(pts, lo, hi, cell, ny, nz, lx, ly, lz,
                    idx_out, w_out, outside_out):
    step_x = ny * nz
    for i in prange(pts.shape[0]):
        x = pts[i, 0]
        y = pts[i, 1]
        z = pts[i, 2]
        cx = min(max(x, lo[0]), hi[0])
        cy = min(max(y, lo[1]), hi[1])
        cz = min(max(z, lo[2]), hi[2])
        dx = x - cx
        dy = y - cy
        dz = z - cz
        gx = (cx - lo[0]) / cell[0]
        gy = (cy - lo[1]) / cell[1]
        gz = (cz - lo[2]) / cell[2]
        ix = min(int(gx), lx)
        iy = min(int(gy), ly)
        iz = min(int(gz), lz)
        u = gx - ix
        v = gy - iy
        w = gz - iz
        nu = 1.0 - u
        nv = 1.0 - v
        nw = 1.0 - w
        base = ix * step_x + iy * nz + iz
        idx_out[i, 0] = base
        idx_out[i, 1] = base + 1
        idx_out[i, 2] = base + nz
        idx_out[i, 3] = base + nz + 1
        idx_out[i, 4] = base + step_x
        idx_out[i, 5] = base + step_x + 1
        idx_out[i, 6] = base + step_x + nz
        idx_out[i, 7] = base + step_x + nz + 1
        w_out[i, 0] = nu * nv * nw
        w_out[i, 1] = nu * nv * w
        w_out[i, 2] = nu * v * nw
        w_out[i, 3] = nu * v * w
        w_out[i, 4] = u * nv * nw
        w_out[i, 5] = u * nv * w
        w_out[i, 6] = u * v * nw
        w_out[i, 7] = u * v * w
        outside_out[i] = np.sqrt(dx * dx + dy * dy + dz * dz)


@njit(inline="always")
def _sample_one(x, y, z, lo, hi, cell, ny, nz, lx, ly, lz, sdf_flat):
    cx = min(max(x, lo[0]), hi[0])
    cy = min(max(y, lo[1]), hi[1])
    cz = min(max(z, lo[2]), hi[2])
    dx = x - cx
    dy = y - cy
    dz = z - cz
    gx = (cx - lo[0]) / cell[0]
    gy = (cy - lo[1]) / cell[1]
    gz = (cz - lo[2]) / cell[2]
    ix = min(int(gx), lx)
    iy = min(int(gy), ly)
    iz = min(int(gz), lz)
    u = gx - ix
    v = gy - iy
    w = gz - iz
    step_x = ny * nz
    base = ix * step_x + iy * nz + iz
    v00 = (1 - w) * sdf_flat[base] + w * sdf_flat[base + 1]
    v01 = (1 - w) * sdf_flat[base + nz] + w * sdf_flat[base + nz + 1]
    v10 = (1 - w) * sdf_flat[base + step_x] + w * sdf_flat[base + step_x + 1]
    v11 = ((1 - w) * sdf_flat[base + step_x + nz]
           + w * sdf_flat[base + step_x + nz + 1])
    val = (1 - u) * ((1 - v) * v00 + v * v01) + u * ((1 - v) * v10 + v * v11)
    return val + np.sqrt(dx * dx + dy * dy + dz * dz)


@njit(parallel=True, cache=True)
def _eik_forward_nb(pts, eps, lo, hi, cell, ny, nz, lx, ly, lz,
                    sdf_flat, g_out):
    inv = 1.0 / (2.0 * eps)
    for i in prange(pts.shape[0]):
        x = pts[i, 0]
        y = pts[i, 1]
        z = pts[i, 2]
        fxp = _sample_one(x + eps, y, z, lo, hi, cell, ny, nz, lx, ly, lz, sdf_flat)
        fxm = _sample_one(x - eps, y, z, lo, hi, cell, ny, nz, lx, ly, lz, sdf_flat)
        fyp = _sample_one(x, y + eps, z, lo, hi, cell, ny, nz, lx, ly, lz, sdf_flat)
        fym = _sample_one(x, y - eps, z, lo, hi, cell, ny, nz, lx, ly, lz, sdf_flat)
        fzp = _sample_one(x, y, z + eps, lo, hi, cell, ny, nz, lx, ly, lz, sdf_flat)
        fzm = _sample_one(x, y, z - eps, lo, hi, cell, ny, nz, lx, ly, lz, sdf_flat)
        g_out[i, 0] = (fxp - fxm) * inv
        g_out[i, 1] = (fyp - fym) * inv
        g_out[i, 2] = (fzp - fzm) * inv


@njit(inline="always")
def _scatter_one(x, y, z, coeff, lo, hi, cell, ny, nz, lx, ly, lz, grad):
    cx = min(max(x, lo[0]), hi[0])
    cy = min(max(y, lo[1]), hi[1])
    cz = min(max(z, lo[2]), hi[2])
    gx = (cx - lo[0]) / cell[0]
    gy = (cy - lo[1]) / cell[1]
    gz = (cz - lo[2]) / cell[2]
    ix = min(int(gx), lx)
    iy = min(int(gy), ly)
    iz = min(int(gz), lz)
    u = gx - ix
    v = gy - iy
    w = gz - iz
    nu = 1.0 - u
    nv = 1.0 - v
    nw = 1.0 - w
    step_x = ny * nz
    base = ix * step_x + iy * nz + iz
    grad[base] += coeff * nu * nv * nw
    grad[base + 1] += coeff * nu * nv * w
    grad[base + nz] += coeff * nu * v * nw
    grad[base + nz + 1] += coeff * nu * v * w
    grad[base + step_x] += coeff * u * nv * nw
    grad[base + step_x + 1] += coeff * u * nv * w
    grad[base + step_x + nz] += coeff * u * v * nw
    grad[base + step_x + nz + 1] += coeff * u * v * w


@njit(cache=True)
def _eik_backward_nb(pts, eps, d_g, lo, hi, cell, ny, nz, lx, ly, lz, grad):
    inv = 1.0 / (2.0 * eps)
    for i in range(pts.shape[0]):
        x = pts[i, 0]
        y = pts[i, 1]
        z = pts[i, 2]
        cx = d_g[i, 0] * inv
        cy = d_g[i, 1] * inv
        cz = d_g[i, 2] * inv
        _scatter_one(x + eps, y, z, cx, lo, hi, cell, ny, nz, lx, ly, lz, grad)
        _scatter_one(x - eps, y, z, -cx, lo, hi, cell, ny, nz, lx, ly, lz, grad)
        _scatter_one(x, y + eps, z, cy, lo, hi, cell, ny, nz, lx, ly, lz, grad)
        _scatter_one(x, y - eps, z, -cy, lo, hi, cell, ny, nz, lx, ly, lz, grad)
        _scatter_one(x, y, z + eps, cz, lo, hi, cell, ny, nz, lx, ly, lz, grad)
        _scatter_one(x, y, z - eps, -cz, lo, hi, cell, ny, nz, lx, ly, lz, grad)


@njit(parallel=True, cache=True)
def _gather1_nb(flat, idx, w, out):
    for i in prange(idx.shape[0]):
        acc = 0.0
        for c in range(8):
            acc += flat[idx[i, c]] * w[i, c]
        out[i] = acc


@njit(parallel=True, cache=True)
def _gather_feat_nb(feat, idx, w, out):
    g = feat.shape[1]
    for i in prange(idx.shape[0]):
        for k in range(g):
            acc = 0.0
            for c in range(8):
                acc += feat[idx[i, c], k] * w[i, c]
            out[i, k] = acc


@njit(cache=True)
def _scatter1_nb(grad, idx, w, coeff):
    for i in range(idx.shape[0]):
        ci = coeff[i]
        for c in range(8):
            grad[idx[i, c]] += ci * w[i, c]


@njit(cache=True)
def _scatter_feat_nb(grad, idx, w, coeff):
    g = grad.shape[1]
    for i in range(idx.shape[0]):
        for c in range(8):
            wc = w[i, c]
            j = idx[i, c]
            for k in range(g):
                grad[j, k] += coeff[i, k] * wc


# ---------------------------------------------------------------------------
# dispatch wrappers (NumPy fallbacks)
# ---------------------------------------------------------------------------

def _np_interp_full(pts, lo, hi, cell, res):
    nx, ny, nz = res
    n = pts.shape[0]
    clamped = np.clip(pts, lo, hi)
    diff = pts - clamped
    outside = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    g = (clamped - lo) / cell
    ic = np.minimum(g.astype(np.int64), np.asarray(res) - 2)
    fr = g - ic
    u, v, w_ = fr[:, 0], fr[:, 1], fr[:, 2]
    nu, nv, nw = 1.0 - u, 1.0 - v, 1.0 - w_
    w = np.empty((n, 8), np.float64)
    w[:, 0] = nu * nv * nw
    w[:, 1] = nu * nv * w_
    w[:, 2] = nu * v * nw
    w[:, 3] = nu * v * w_
    w[:, 4] = u * nv * nw
    w[:, 5] = u * nv * w_
    w[:, 6] = u * v * nw
    w[:, 7] = u * v * w_
    base = (ic[:, 0] * ny + ic[:, 1]) * nz + ic[:, 2]
    offsets = np.array([0, 1, nz, nz + 1, ny * nz, ny * nz + 1,
                        ny * nz + nz, ny * nz + nz + 1], np.int64)
    return base[:, None] + offsets[None, :], w, outside


def interp_full(pts, lo, hi, cell, res):
    """(corner indices (N,8), weights (N,8), out-of-bounds distance (N,))."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if USE_NUMBA:
        nx, ny, nz = res
        n = pts.shape[0]
        idx = np.empty((n, 8), np.int64)
        w = np.empty((n, 8), np.float64)
        outside = np.empty(n, np.float64)
        _interp_full_nb(pts, lo, hi, cell, ny, nz, nx - 2, ny - 2, nz - 2,
                        idx, w, outside)
        return idx, w, outside
    return _np_interp_full(pts, lo, hi, cell, res)


def sdf_only(pts, lo, hi, cell, res, sdf_flat):
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if USE_NUMBA:
        nx, ny, nz = res
        out = np.empty(pts.shape[0], np.float64)
        _sdf_only_nb(pts, lo, hi, cell, ny, nz, nx - 2, ny - 2, nz - 2,
                     sdf_flat, out)
        return out
    idx, w, outside = _np_interp_full(pts, lo, hi, cell, res)
    return (sdf_flat[idx] * w).sum(-1) + outside


def eikonal_forward(pts, eps, lo, hi, cell, res, sdf_flat):
    """Central-difference SDF gradient at every point, shape (N, 3)."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if USE_NUMBA:
        nx, ny, nz = res
        g = np.empty((pts.shape[0], 3), np.float64)
        _eik_forward_nb(pts, eps, lo, hi, cell, ny, nz, nx - 2, ny - 2,
                        nz - 2, sdf_flat, g)
        return g
    g = np.empty((pts.shape[0], 3), np.float64)
    for a in range(3):
        off = np.zeros(3)
        off[a] = eps
        fp = sdf_only(pts + off, lo, hi, cell, res, sdf_flat)
        fm = sdf_only(pts - off, lo, hi, cell, res, sdf_flat)
        g[:, a] = (fp - fm) / (2.0 * eps)
    return g


def eikonal_backward(pts, eps, d_g, lo, hi, cell, res, grad):
    """Scatter the loss gradient through the six-probe stencil into ``grad``."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    d_g = np.ascontiguousarray(d_g, dtype=np.float64)
    if USE_NUMBA:
        nx, ny, nz = res
        _eik_backward_nb(pts, eps, d_g, lo, hi, cell, ny, nz, nx - 2,
                         ny - 2, nz - 2, grad)
        return
    for a in range(3):
        off = np.zeros(3)
        off[a] = eps
        for sign in (1.0, -1.0):
            idx, w, _ = _np_interp_full(pts + sign * off, lo, hi, cell, res)
            coeff = sign * d_g[:, a] / (2.0 * eps)
            np.add.at(grad, idx.ravel(), (coeff[:, None] * w).ravel())


def gather1(flat, idx, w):
    if USE_NUMBA:
        out = np.empty(idx.shape[0], np.float64)
        _gather1_nb(flat, idx, w, out)
        return out
    return (flat[idx] * w).sum(-1)


def gather_feat(feat, idx, w):
    if USE_NUMBA:
        out = np.empty((idx.shape[0], feat.shape[1]), np.float64)
        _gather_feat_nb(feat, idx, w, out)
        return out
    return (feat[idx] * w[..., None]).sum(-2)


def scatter1(grad, idx, w, coeff):
    """grad[idx[i,c]] += coeff[i] * w[i,c]; single-threaded (deterministic)."""
    if USE_NUMBA:
        _scatter1_nb(grad, idx, w, coeff)
        return
    np.add.at(grad, idx.ravel(), (coeff[:, None] * w).ravel())


def scatter_feat(grad, idx, w, coeff):
    if USE_NUMBA:
        _scatter_feat_nb(grad, idx, w, coeff)
        return
    for k in range(grad.shape[1]):
        np.add.at(grad[:, k], idx.ravel(), (coeff[:, k:k + 1] * w).ravel())
