"""Convex hulls, Delaunay tetrahedralization, point location and cuboid region masks.

The tetrahedralization is built by incremental Bowyer-Watson insertion over a
closed complex that includes ghost tetrahedra (hull facets joined to a vertex
at infinity), so the result always covers the convex hull. Cospherical and
coplanar inputs, e.g. the 8 corners of a box, are handled by a tiny
deterministic perturbation keyed on input order; combinatorics come from the
perturbed points, every reported quantity from the original ones.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import SegMask
from .kernels import locate_points, rasterize_tets, tet_barycentric_operators

BOUNDARY_TOL = 1e-9
_PERTURB = 1e-9
_GHOST = -1


class DegenerateGeometryError(ValueError):
    """Point cloud does not span 3D (coplanar, collinear or too few points)."""


def _orient(a, b, c, d) -> float:
    """Positive when ``d`` lies on the side of ``(b - a) x (c - a)``."""
    return float(np.linalg.det(np.array([b - a, c - a, d - a])))


def _insphere(a, b, c, d, p) -> float:
    """Positive when ``p`` is inside the circumsphere of positively oriented ``abcd``."""
    m = np.empty((4, 4))
    for r, q in enumerate((a, b, c, d)):
        diff = q - p
        m[r, :3] = diff
        m[r, 3] = diff @ diff
    return -float(np.linalg.det(m))


def _in_circumcircle(a, b, c, p) -> bool:
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    nn = n @ n
    if nn == 0.0:
        return False
    center = a + (np.cross(n, ab) * (ac @ ac) + np.cross(ac, n) * (ab @ ab)) / (2.0 * nn)
    r2 = (a - center) @ (a - center)
    return float((p - center) @ (p - center)) < r2 * (1.0 - 1e-12)


def _check_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
    if pts.shape[0] < 4:
        raise DegenerateGeometryError(f"need at least 4 points, got {pts.shape[0]}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0.0 or sv[2] / sv[0] < 1e-10:
        raise DegenerateGeometryError("points do not span 3D (coplanar or collinear)")
    return pts


def _perturbed_unit(pts: np.ndarray) -> np.ndarray:
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = float(np.max(hi - lo))
    unit = (pts - (lo + hi) / 2.0) / scale
    # fixed stream: point i always receives the same offset
    offsets = np.random.default_rng(0x5EED).uniform(-1.0, 1.0, size=(pts.shape[0], 3))
    return unit + _PERTURB * offsets


_FACES = ((1, 3, 2), (0, 2, 3), (0, 3, 1), (0, 1, 2))  # face opposite vertex k, k on positive side


def _ghost_last(t: tuple) -> tuple:
    """Even permutation of ``t`` moving the ghost vertex to the last slot."""
    k = t.index(_GHOST)
    if k == 3:
        return t
    lst = list(t)
    lst[k], lst[3] = lst[3], lst[k]
    j = 0 if k != 0 else 1
    i = 1 if k != 1 else 2
    lst[i], lst[j] = lst[j], lst[i]
    return tuple(lst)


class _BowyerWatson:
    def __init__(self, pts: np.ndarray):
        self.p = pts
        self.tets: list[tuple | None] = []
        self.faces: dict[tuple, list[int]] = {}

    def _add(self, t: tuple) -> int:
        idx = len(self.tets)
        self.tets.append(t)
        for f in _FACES:
            key = tuple(sorted(t[i] for i in f))
            self.faces.setdefault(key, []).append(idx)
        return idx

    def _remove(self, idx: int) -> None:
        t = self.tets[idx]
        for f in _FACES:
            key = tuple(sorted(t[i] for i in f))
            lst = self.faces[key]
            lst.remove(idx)
            if not lst:
                del self.faces[key]
        self.tets[idx] = None

    def _neighbor(self, idx: int, face_key: tuple) -> int:
        for other in self.faces[face_key]:
            if other != idx:
                return other
        raise RuntimeError("open face in closed complex")

    def _conflict(self, t: tuple, q: np.ndarray) -> bool:
        P = self.p
        if t[3] == _GHOST:
            a, b, c = P[t[0]], P[t[1]], P[t[2]]
            o = _orient(a, b, c, q)
            if o > 0:
                return True
            if o < 0:
                return False
            return _in_circumcircle(a, b, c, q)
        return _insphere(P[t[0]], P[t[1]], P[t[2]], P[t[3]], q) > 0

    def _contains(self, t: tuple, q: np.ndarray) -> bool:
        if t[3] == _GHOST:
            return False
        P = self.p
        for f in _FACES:
            # inward test: q on the same side of each face as the opposite vertex
            if _orient(P[t[f[0]]], P[t[f[1]]], P[t[f[2]]], q) < 0:
                return False
        return True

    def initial(self, order: list[int]) -> list[int]:
        P = self.p
        i0 = order[0]
        d = np.linalg.norm(P - P[i0], axis=1)
        i1 = int(np.argmax(d))
        line = P[i1] - P[i0]
        cr = np.linalg.norm(np.cross(P - P[i0], line), axis=1)
        i2 = int(np.argmax(cr))
        n = np.cross(P[i1] - P[i0], P[i2] - P[i0])
        vol = (P - P[i0]) @ n
        i3 = int(np.argmax(np.abs(vol)))
        if vol[i3] < 0:
            i1, i2 = i2, i1
        seed = (i0, i1, i2, i3)
        self._add(seed)
        for f in _FACES:
            # ghost on the outside of each face: outward face = reversed inward face
            fa = (seed[f[0]], seed[f[2]], seed[f[1]])
            self._add(fa + (_GHOST,))
        used = set(seed)
        return [i for i in order if i not in used]

    def insert(self, vi: int) -> None:
        q = self.p[vi]
        start = None
        for idx, t in enumerate(self.tets):
            if t is not None and self._contains(t, q):
                start = idx
                break
        if start is None:
            best = -np.inf
            for idx, t in enumerate(self.tets):
                if t is not None and t[3] == _GHOST:
                    o = _orient(self.p[t[0]], self.p[t[1]], self.p[t[2]], q)
                    if o > best:
                        best, start = o, idx
        cavity = {start}
        queue = deque([start])
        boundary = []
        while queue:
            idx = queue.popleft()
            t = self.tets[idx]
            for f in _FACES:
                face = tuple(t[i] for i in f)
                nb = self._neighbor(idx, tuple(sorted(face)))
                if nb in cavity:
                    continue
                if self._conflict(self.tets[nb], q):
                    cavity.add(nb)
                    queue.append(nb)
                else:
                    boundary.append(face)
        # faces shared by two cavity tets may have been recorded before the second joined
        boundary = [f for f in boundary if not all(n in cavity for n in self.faces[tuple(sorted(f))])]
        for idx in cavity:
            self._remove(idx)
        for face in boundary:
            t = face + (vi,)
            if _GHOST in t:
                t = _ghost_last(t)
            self._add(t)

    def real_tets(self) -> np.ndarray:
        out = [t for t in self.tets if t is not None and _GHOST not in t]
        return np.array(out, dtype=np.int64).reshape(-1, 4)


def _tet_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    v = vertices[tets]
    return np.linalg.det(v[:, 1:, :] - v[:, :1, :]) / 6.0


@dataclass(frozen=True, eq=False)
class Triangulation3:
    """Tetrahedralization of ``vertices``; every tet positively oriented."""

    vertices: np.ndarray
    tetrahedra: np.ndarray
    _inv: np.ndarray = field(repr=False, default=None)
    _anchor: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.tetrahedra, dtype=np.int64).reshape(-1, 4)
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "tetrahedra", t)
        if len(t):
            inv, anchor = tet_barycentric_operators(v, t)
        else:
            inv, anchor = np.zeros((0, 3, 3)), np.zeros((0, 3))
        object.__setattr__(self, "_inv", inv)
        object.__setattr__(self, "_anchor", anchor)

    @property
    def volumes(self) -> np.ndarray:
        return _tet_volumes(self.vertices, self.tetrahedra)

    @property
    def volume(self) -> float:
        return float(self.volumes.sum())

    def boundary_facets(self) -> np.ndarray:
        """Outward-oriented triangles that belong to exactly one tet."""
        count: dict[tuple, list] = {}
        for t in self.tetrahedra:
            for f in _FACES:
                face = (t[f[0]], t[f[2]], t[f[1]])  # reversed -> outward
                count.setdefault(tuple(sorted(face)), []).append(face)
        return np.array([v[0] for v in count.values() if len(v) == 1], dtype=np.int64).reshape(-1, 3)

    def find_simplex(self, points, tol: float = BOUNDARY_TOL) -> np.ndarray:
        """Containing tet index per point, ``-1`` outside (boundary counts as inside)."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        out = locate_points(pts.reshape(-1, 3), self._inv, self._anchor, tol)
        return out[0] if single else out


def delaunay(points) -> Triangulation3:
    """Delaunay tetrahedralization by incremental insertion in input order."""
    pts = _check_cloud(points)
    work = _perturbed_unit(pts)
    bw = _BowyerWatson(work)
    rest = bw.initial(list(range(len(pts))))
    for vi in rest:
        bw.insert(vi)
    tets = bw.real_tets()
    vols = _tet_volumes(pts, tets)
    scale = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    keep = np.abs(vols) > 1e-12 * scale**3
    tets, vols = tets[keep], vols[keep]
    flip = vols < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return Triangulation3(pts, tets)


def find_simplex(tri: Triangulation3, point, tol: float = BOUNDARY_TOL):
    """Index of a tet containing ``point`` or ``None`` when outside the hull."""
    idx = int(tri.find_simplex(np.asarray(point, dtype=np.float64).reshape(3), tol))
    return None if idx < 0 else idx


@dataclass(frozen=True, eq=False)
class ConvexHull:
    points: np.ndarray
    vertices: np.ndarray  # indices of extreme points
    facets: np.ndarray  # outward-oriented triangles (indices into points)
    triangulation: Triangulation3

    @property
    def volume(self) -> float:
        p = self.points
        a, b, c = p[self.facets[:, 0]], p[self.facets[:, 1]], p[self.facets[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    @property
    def area(self) -> float:
        p = self.points
        a, b, c = p[self.facets[:, 0]], p[self.facets[:, 1]], p[self.facets[:, 2]]
        return float(np.linalg.norm(np.cross(b - a, c - a), axis=1).sum() / 2.0)

    def contains(self, points, tol: float = BOUNDARY_TOL) -> np.ndarray:
        return self.triangulation.find_simplex(points, tol) >= 0


def _is_extreme(pts: np.ndarray, i: int, candidates: np.ndarray) -> bool:
    """``pts[i]`` is extreme iff it is not a convex combination of the other candidates."""
    from scipy.optimize import linprog

    others = pts[candidates[candidates != i]]
    k = len(others)
    a_eq = np.vstack([others.T, np.ones((1, k))])
    b_eq = np.append(pts[i], 1.0)
    res = linprog(np.zeros(k), A_eq=a_eq, b_eq=b_eq, bounds=[(0, None)] * k, method="highs")
    return res.status != 0


def convex_hull(points) -> ConvexHull:
    """Hull facets as the boundary of the Delaunay tetrahedralization."""
    tri = delaunay(points)
    facets = tri.boundary_facets()
    cand = np.unique(facets)
    verts = np.array([i for i in cand if _is_extreme(tri.vertices, int(i), cand)], dtype=np.int64)
    return ConvexHull(tri.vertices, verts, facets, tri)


def region_mask(tri: Triangulation3, grid_shape, spacing=(1.0, 1.0, 1.0)) -> SegMask:
    """Mask of voxels whose centers lie in the triangulated region."""
    grid = rasterize_tets(grid_shape, tri.vertices, tri.tetrahedra, BOUNDARY_TOL)
    return SegMask.from_bool(grid, spacing)


def cuboid_region(points, grid_shape, spacing=(1.0, 1.0, 1.0)) -> SegMask:
    return region_mask(delaunay(points), grid_shape, spacing)


def restrict_prediction(pred: SegMask, region: SegMask) -> SegMask:
    if pred.shape != region.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {region.shape}")
    return SegMask.from_bool(pred.as_bool() & region.as_bool(), pred.spacing, pred.origin)
