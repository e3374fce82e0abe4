"""Hot inner loops, each with a numba kernel and a vectorized numpy twin.

The public wrappers dispatch on :func:`toothseg._accel.numba_enabled`; both
paths must agree bit-for-bit on the boolean kernels and to float rounding on
the Gaussian fill (checked in ``tests/test_kernels.py``).
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import numba_enabled, try_njit

# ------------------------------------------------------------ gaussian fill


@try_njit(cache=True)
def _gaussian_fill_nb(out, cx, cy, cz, px, py, pz, sigma, radius, squared):
    nx, ny, nz = out.shape
    x0 = max(0, int(math.floor(cx - radius)))
    x1 = min(nx - 1, int(math.ceil(cx + radius)))
    y0 = max(0, int(math.floor(cy - radius)))
    y1 = min(ny - 1, int(math.ceil(cy + radius)))
    z0 = max(0, int(math.floor(cz - radius)))
    z1 = min(nz - 1, int(math.ceil(cz + radius)))
    two_s2 = 2.0 * sigma * sigma
    dp2 = (px - cx) ** 2 + (py - cy) ** 2 + (pz - cz) ** 2
    ref = dp2 if squared else math.sqrt(dp2)
    r2 = radius * radius
    for i in range(x0, x1 + 1):
        dx2 = (i - cx) ** 2
        for j in range(y0, y1 + 1):
            dxy2 = dx2 + (j - cy) ** 2
            for k in range(z0, z1 + 1):
                d2 = dxy2 + (k - cz) ** 2
                if d2 > r2:
                    continue
                d = d2 if squared else math.sqrt(d2)
                out[i, j, k] = math.exp(-(d - ref) / two_s2)


def _gaussian_fill_np(out, cx, cy, cz, px, py, pz, sigma, radius, squared):
    nx, ny, nz = out.shape
    lo = [max(0, int(math.floor(c - radius))) for c in (cx, cy, cz)]
    hi = [min(n - 1, int(math.ceil(c + radius))) for c, n in zip((cx, cy, cz), (nx, ny, nz))]
    if any(h < l for l, h in zip(lo, hi)):
        return
    xs = np.arange(lo[0], hi[0] + 1, dtype=np.float64)[:, None, None]
    ys = np.arange(lo[1], hi[1] + 1, dtype=np.float64)[None, :, None]
    zs = np.arange(lo[2], hi[2] + 1, dtype=np.float64)[None, None, :]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2 + (zs - cz) ** 2
    dp2 = (px - cx) ** 2 + (py - cy) ** 2 + (pz - cz) ** 2
    if squared:
        vals = np.exp(-(d2 - dp2) / (2.0 * sigma * sigma))
    else:
        vals = np.exp(-(np.sqrt(d2) - math.sqrt(dp2)) / (2.0 * sigma * sigma))
    block = out[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    inside = d2 <= radius * radius
    block[inside] = vals[inside]


def gaussian_fill(out: np.ndarray, center, peak, sigma: float, radius: float, squared: bool = True) -> None:
    """Write a truncated Gaussian into ``out`` in place.

    Values are normalized so the voxel ``peak`` reads exactly 1; voxels
    farther than ``radius`` from ``center`` are left untouched.
    """
    args = (
        float(center[0]), float(center[1]), float(center[2]),
        float(peak[0]), float(peak[1]), float(peak[2]),
        float(sigma), float(radius), bool(squared),
    )
    if numba_enabled():
        _gaussian_fill_nb(out, *args)
    else:
        _gaussian_fill_np(out, *args)


# -------------------------------------------------------- point location


def tet_barycentric_operators(vertices: np.ndarray, tets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-tet inverse edge matrices and anchor vertices.

    For tet ``t`` with vertices ``v0..v3`` and point ``p``, the barycentric
    weights of ``v1..v3`` are ``T[t] @ (p - v0)``; weight of ``v0`` is one
    minus their sum.
    """
    v = vertices[tets]  # (m, 4, 3)
    edges = np.transpose(v[:, 1:, :] - v[:, :1, :], (0, 2, 1))  # columns are edges
    inv = np.linalg.inv(edges)
    return np.ascontiguousarray(inv), np.ascontiguousarray(v[:, 0, :])


@try_njit(cache=True)
def _locate_nb(points, inv, anchor, tol):
    n = points.shape[0]
    m = inv.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    for p in range(n):
        for t in range(m):
            dx = points[p, 0] - anchor[t, 0]
            dy = points[p, 1] - anchor[t, 1]
            dz = points[p, 2] - anchor[t, 2]
            b1 = inv[t, 0, 0] * dx + inv[t, 0, 1] * dy + inv[t, 0, 2] * dz
            if b1 < -tol:
                continue
            b2 = inv[t, 1, 0] * dx + inv[t, 1, 1] * dy + inv[t, 1, 2] * dz
            if b2 < -tol:
                continue
            b3 = inv[t, 2, 0] * dx + inv[t, 2, 1] * dy + inv[t, 2, 2] * dz
            if b3 < -tol:
                continue
            if 1.0 - b1 - b2 - b3 < -tol:
                continue
            out[p] = t
            break
    return out


def _locate_np(points, inv, anchor, tol, chunk=4096):
    n = points.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    for start in range(0, n, chunk):
        pts = points[start:start + chunk]
        d = pts[:, None, :] - anchor[None, :, :]  # (c, m, 3)
        b = np.einsum("mij,cmj->cmi", inv, d)
        b0 = 1.0 - b.sum(axis=2)
        inside = np.all(b >= -tol, axis=2) & (b0 >= -tol)
        hit = inside.any(axis=1)
        out[start:start + chunk][hit] = inside[hit].argmax(axis=1)
    return out


def locate_points(points: np.ndarray, inv: np.ndarray, anchor: np.ndarray, tol: float) -> np.ndarray:
    """Lowest-index containing tet for each point, ``-1`` when none."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if inv.shape[0] == 0:
        return np.full(points.shape[0], -1, dtype=np.int64)
    if numba_enabled():
        return _locate_nb(points, inv, anchor, float(tol))
    return _locate_np(points, inv, anchor, float(tol))


@try_njit(cache=True)
def _rasterize_nb(out, vertices, tets, inv, anchor, tol):
    nx, ny, nz = out.shape
    for t in range(tets.shape[0]):
        lo = np.empty(3, dtype=np.int64)
        hi = np.empty(3, dtype=np.int64)
        dims = (nx, ny, nz)
        for a in range(3):
            vmin = vertices[tets[t, 0], a]
            vmax = vmin
            for c in range(1, 4):
                val = vertices[tets[t, c], a]
                vmin = min(vmin, val)
                vmax = max(vmax, val)
            lo[a] = max(0, int(math.ceil(vmin - tol)))
            hi[a] = min(dims[a] - 1, int(math.floor(vmax + tol)))
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    if out[i, j, k]:
                        continue
                    dx = i - anchor[t, 0]
                    dy = j - anchor[t, 1]
                    dz = k - anchor[t, 2]
                    b1 = inv[t, 0, 0] * dx + inv[t, 0, 1] * dy + inv[t, 0, 2] * dz
                    b2 = inv[t, 1, 0] * dx + inv[t, 1, 1] * dy + inv[t, 1, 2] * dz
                    b3 = inv[t, 2, 0] * dx + inv[t, 2, 1] * dy + inv[t, 2, 2] * dz
                    if b1 >= -tol and b2 >= -tol and b3 >= -tol and 1.0 - b1 - b2 - b3 >= -tol:
                        out[i, j, k] = True


def _rasterize_np(out, vertices, tets, inv, anchor, tol):
    dims = np.asarray(out.shape)
    for t in range(tets.shape[0]):
        v = vertices[tets[t]]
        lo = np.maximum(0, np.ceil(v.min(axis=0) - tol)).astype(np.int64)
        hi = np.minimum(dims - 1, np.floor(v.max(axis=0) + tol)).astype(np.int64)
        if np.any(hi < lo):
            continue
        grid = np.stack(
            np.meshgrid(*(np.arange(l, h + 1) for l, h in zip(lo, hi)), indexing="ij"), axis=-1
        ).astype(np.float64)
        b = (grid - anchor[t]) @ inv[t].T
        inside = np.all(b >= -tol, axis=-1) & (1.0 - b.sum(axis=-1) >= -tol)
        out[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] |= inside


def rasterize_tets(shape, vertices: np.ndarray, tets: np.ndarray, tol: float) -> np.ndarray:
    """Boolean grid marking voxel centers inside any tet (boundary inclusive)."""
    out = np.zeros(tuple(int(s) for s in shape), dtype=np.bool_)
    if len(tets) == 0:
        return out
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    tets = np.ascontiguousarray(tets, dtype=np.int64)
    inv, anchor = tet_barycentric_operators(vertices, tets)
    if numba_enabled():
        _rasterize_nb(out, vertices, tets, inv, anchor, float(tol))
    else:
        _rasterize_np(out, vertices, tets, inv, anchor, float(tol))
    return out
