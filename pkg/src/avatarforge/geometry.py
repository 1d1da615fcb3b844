"""Triangle meshes, BVH acceleration, closest-point/ray queries, and mesh distances.

Coordinates are float64 world units of arbitrary scale. All query functions are
read-only and safe to call concurrently once a mesh/BVH has been built.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from .errors import InvalidInputError

__all__ = [
    "Mesh",
    "Bvh",
    "ClosestPoint",
    "RayHit",
    "build_bvh",
    "closest_point_on_mesh",
    "closest_points_on_mesh",
    "ray_mesh_intersect",
    "hausdorff_distance",
    "sample_surface",
    "compute_vertex_normals",
    "load_obj",
    "save_obj",
]


# ---------------------------------------------------------------------------
# Mesh


@dataclass
class Mesh:
    """Indexed triangle mesh with per-vertex normals, UVs and optional labels.

    labels maps a region name (e.g. "hair", "face") to an int array of vertex
    indices. UVs live in [0, 1]^2.
    """

    vertices: np.ndarray            # (N, 3) float64
    triangles: np.ndarray           # (M, 3) int32
    normals: np.ndarray | None = None
    uvs: np.ndarray | None = None
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32)
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise InvalidInputError("triangle index exceeds vertex count")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
        if self.uvs is not None:
            self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def recompute_normals(self) -> "Mesh":
        self.normals = compute_vertex_normals(self.vertices, self.triangles)
        return self

    def triangle_corners(self) -> np.ndarray:
        """(M, 3, 3) corner positions."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        c = self.triangle_corners()
        cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def copy(self) -> "Mesh":
        return Mesh(
            self.vertices.copy(),
            self.triangles.copy(),
            None if self.normals is None else self.normals.copy(),
            None if self.uvs is None else self.uvs.copy(),
            {k: v.copy() for k, v in self.labels.items()},
        )


def compute_vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex normals, unit length (zeros stay zero-safe)."""
    c = vertices[triangles]
    face_n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])  # length = 2*area
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, triangles[:, k], face_n)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    norm[norm < 1e-300] = 1.0
    return normals / norm


# ---------------------------------------------------------------------------
# BVH


@dataclass
class Bvh:
    """Axis-aligned bounding-box tree over a mesh's triangles.

    Every triangle is referenced by exactly one leaf (through ``order``).
    Immutable after construction; queries are thread-safe.
    """

    vertices: np.ndarray        # (N, 3)
    triangles: np.ndarray       # (M, 3)
    node_min: np.ndarray        # (K, 3)
    node_max: np.ndarray        # (K, 3)
    node_left: np.ndarray       # (K,) child index, -1 for leaves
    node_right: np.ndarray      # (K,)
    node_start: np.ndarray      # (K,) leaf range into order
    node_count: np.ndarray      # (K,)
    order: np.ndarray           # (M,) permutation of triangle ids
    leaf_size: int = 8


def build_bvh(mesh: Mesh, leaf_size: int = 8) -> Bvh:
    """Build a median-split BVH. Raises InvalidInputError for an empty mesh."""
    if mesh.n_triangles < 1:
        raise InvalidInputError("cannot build a BVH over an empty mesh")
    corners = mesh.triangle_corners()
    tri_min = corners.min(axis=1)
    tri_max = corners.max(axis=1)
    centroids = corners.mean(axis=1)

    order = np.arange(mesh.n_triangles, dtype=np.int64)
    n_min, n_max, left, right, start, count = [], [], [], [], [], []

    # Iterative median split on the longest centroid axis.
    stack = [(0, mesh.n_triangles, -1, False)]
    while stack:
        lo, hi, parent, is_right = stack.pop()
        idx = len(n_min)
        seg = order[lo:hi]
        n_min.append(tri_min[seg].min(axis=0))
        n_max.append(tri_max[seg].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        if parent >= 0:
            if is_right:
                right[parent] = idx
            else:
                left[parent] = idx
        n = hi - lo
        if n <= leaf_size:
            continue
        cen = centroids[seg]
        extent = cen.max(axis=0) - cen.min(axis=0)
        axis = int(np.argmax(extent))
        if extent[axis] <= 0.0:
            continue  # coincident centroids: keep as an oversized leaf
        mid = n // 2
        part = np.argpartition(cen[:, axis], mid, kind="introselect")
        order[lo:hi] = seg[part]
        start[idx] = -1
        count[idx] = 0
        # Push right first so left is processed (and numbered) first.
        stack.append((lo + mid, hi, idx, True))
        stack.append((lo, lo + mid, idx, False))

    return Bvh(
        vertices=np.ascontiguousarray(mesh.vertices),
        triangles=np.ascontiguousarray(mesh.triangles),
        node_min=np.ascontiguousarray(n_min, dtype=np.float64),
        node_max=np.ascontiguousarray(n_max, dtype=np.float64),
        node_left=np.asarray(left, dtype=np.int64),
        node_right=np.asarray(right, dtype=np.int64),
        node_start=np.asarray(start, dtype=np.int64),
        node_count=np.asarray(count, dtype=np.int64),
        order=order,
        leaf_size=leaf_size,
    )


# --- numba kernels ---------------------------------------------------------


@njit(cache=True, inline="always")
def _dot3(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


@njit(cache=True)
def _tri_closest(px, py, pz, a, b, c):
    """Closest point on triangle abc to p; returns (dist_sq, qx, qy, qz).

    Region walk after Ericson's Real-Time Collision Detection, with guarded
    denominators so degenerate (zero-area) triangles cannot produce NaNs.
    """
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = px - a[0], py - a[1], pz - a[2]

    d1 = _dot3(abx, aby, abz, apx, apy, apz)
    d2 = _dot3(acx, acy, acz, apx, apy, apz)
    if d1 <= 0.0 and d2 <= 0.0:
        dx, dy, dz = px - a[0], py - a[1], pz - a[2]
        return _dot3(dx, dy, dz, dx, dy, dz), a[0], a[1], a[2]

    bpx, bpy, bpz = px - b[0], py - b[1], pz - b[2]
    d3 = _dot3(abx, aby, abz, bpx, bpy, bpz)
    d4 = _dot3(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0.0 and d4 <= d3:
        dx, dy, dz = px - b[0], py - b[1], pz - b[2]
        return _dot3(dx, dy, dz, dx, dy, dz), b[0], b[1], b[2]

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        denom = d1 - d3
        v = d1 / denom if denom != 0.0 else 0.0
        qx, qy, qz = a[0] + v * abx, a[1] + v * aby, a[2] + v * abz
        dx, dy, dz = px - qx, py - qy, pz - qz
        return _dot3(dx, dy, dz, dx, dy, dz), qx, qy, qz

    cpx, cpy, cpz = px - c[0], py - c[1], pz - c[2]
    d5 = _dot3(abx, aby, abz, cpx, cpy, cpz)
    d6 = _dot3(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0.0 and d5 <= d6:
        dx, dy, dz = px - c[0], py - c[1], pz - c[2]
        return _dot3(dx, dy, dz, dx, dy, dz), c[0], c[1], c[2]

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        denom = d2 - d6
        w = d2 / denom if denom != 0.0 else 0.0
        qx, qy, qz = a[0] + w * acx, a[1] + w * acy, a[2] + w * acz
        dx, dy, dz = px - qx, py - qy, pz - qz
        return _dot3(dx, dy, dz, dx, dy, dz), qx, qy, qz

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        denom = (d4 - d3) + (d5 - d6)
        w = (d4 - d3) / denom if denom != 0.0 else 0.0
        qx = b[0] + w * (c[0] - b[0])
        qy = b[1] + w * (c[1] - b[1])
        qz = b[2] + w * (c[2] - b[2])
        dx, dy, dz = px - qx, py - qy, pz - qz
        return _dot3(dx, dy, dz, dx, dy, dz), qx, qy, qz

    denom = va + vb + vc
    if denom <= 0.0:
        dx, dy, dz = px - a[0], py - a[1], pz - a[2]
        return _dot3(dx, dy, dz, dx, dy, dz), a[0], a[1], a[2]
    v = vb / denom
    w = vc / denom
    qx = a[0] + v * abx + w * acx
    qy = a[1] + v * aby + w * acy
    qz = a[2] + v * abz + w * acz
    dx, dy, dz = px - qx, py - qy, pz - qz
    return _dot3(dx, dy, dz, dx, dy, dz), qx, qy, qz


@njit(cache=True, inline="always")
def _box_dist_sq(px, py, pz, bmin, bmax):
    d = 0.0
    for i in range(3):
        v = px if i == 0 else (py if i == 1 else pz)
        if v < bmin[i]:
            t = bmin[i] - v
            d += t * t
        elif v > bmax[i]:
            t = v - bmax[i]
            d += t * t
    return d


@njit(cache=True)
def _bvh_closest(px, py, pz, verts, tris,
                 node_min, node_max, node_left, node_right,
                 node_start, node_count, order):
    best_d = np.inf
    best_tri = -1
    bx = by = bz = 0.0
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        ni = stack[sp]
        # Non-strict prune keeps equal-distance candidates reachable so the
        # lowest-index tie rule stays order-independent.
        if _box_dist_sq(px, py, pz, node_min[ni], node_max[ni]) > best_d:
            continue
        if node_left[ni] < 0:
            s = node_start[ni]
            for k in range(node_count[ni]):
                ti = order[s + k]
                a = verts[tris[ti, 0]]
                b = verts[tris[ti, 1]]
                c = verts[tris[ti, 2]]
                d, qx, qy, qz = _tri_closest(px, py, pz, a, b, c)
                if d < best_d or (d == best_d and ti < best_tri):
                    best_d = d
                    best_tri = ti
                    bx, by, bz = qx, qy, qz
        else:
            l, r = node_left[ni], node_right[ni]
            dl = _box_dist_sq(px, py, pz, node_min[l], node_max[l])
            dr = _box_dist_sq(px, py, pz, node_min[r], node_max[r])
            if dl < dr:
                stack[sp] = r
                sp += 1
                stack[sp] = l
                sp += 1
            else:
                stack[sp] = l
                sp += 1
                stack[sp] = r
                sp += 1
    return best_d, best_tri, bx, by, bz


@njit(cache=True, parallel=True)
def _bvh_closest_batch(points, verts, tris, node_min, node_max, node_left,
                       node_right, node_start, node_count, order,
                       out_d, out_tri, out_q):
    for i in prange(points.shape[0]):
        d, ti, qx, qy, qz = _bvh_closest(
            points[i, 0], points[i, 1], points[i, 2], verts, tris,
            node_min, node_max, node_left, node_right,
            node_start, node_count, order)
        out_d[i] = d
        out_tri[i] = ti
        out_q[i, 0] = qx
        out_q[i, 1] = qy
        out_q[i, 2] = qz


@njit(cache=True, inline="always")
def _ray_tri(ox, oy, oz, dx, dy, dz, a, b, c):
    """Moller-Trumbore. Returns (hit, t, u, v) with u, v barycentric on b, c."""
    e1x, e1y, e1z = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    e2x, e2y, e2z = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    hx = dy * e2z - dz * e2y
    hy = dz * e2x - dx * e2z
    hz = dx * e2y - dy * e2x
    det = e1x * hx + e1y * hy + e1z * hz
    if abs(det) < 1e-14:
        return False, 0.0, 0.0, 0.0
    inv = 1.0 / det
    sx, sy, sz = ox - a[0], oy - a[1], oz - a[2]
    u = (sx * hx + sy * hy + sz * hz) * inv
    if u < -1e-9 or u > 1.0 + 1e-9:
        return False, 0.0, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -1e-9 or u + v > 1.0 + 1e-9:
        return False, 0.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= 1e-12:
        return False, 0.0, 0.0, 0.0
    return True, t, u, v


@njit(cache=True, inline="always")
def _ray_box(ox, oy, oz, idx, idy, idz, bmin, bmax, tmax):
    t0 = 1e-12
    t1 = tmax
    for i in range(3):
        o = ox if i == 0 else (oy if i == 1 else oz)
        inv = idx if i == 0 else (idy if i == 1 else idz)
        lo = (bmin[i] - o) * inv
        hi = (bmax[i] - o) * inv
        if lo > hi:
            lo, hi = hi, lo
        if lo > t0:
            t0 = lo
        if hi < t1:
            t1 = hi
        if t0 > t1:
            return False
    return True


@njit(cache=True)
def _bvh_ray(ox, oy, oz, dx, dy, dz, verts, tris,
             node_min, node_max, node_left, node_right,
             node_start, node_count, order):
    idx = 1.0 / dx if dx != 0.0 else np.inf
    idy = 1.0 / dy if dy != 0.0 else np.inf
    idz = 1.0 / dz if dz != 0.0 else np.inf
    best_t = np.inf
    best_tri = -1
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        ni = stack[sp]
        if not _ray_box(ox, oy, oz, idx, idy, idz,
                        node_min[ni], node_max[ni], best_t):
            continue
        if node_left[ni] < 0:
            s = node_start[ni]
            for k in range(node_count[ni]):
                ti = order[s + k]
                a = verts[tris[ti, 0]]
                b = verts[tris[ti, 1]]
                c = verts[tris[ti, 2]]
                hit, t, u, v = _ray_tri(ox, oy, oz, dx, dy, dz, a, b, c)
                if hit and (t < best_t or (t == best_t and ti < best_tri)):
                    best_t = t
                    best_tri = ti
                    best_u = u
                    best_v = v
        else:
            stack[sp] = node_right[ni]
            sp += 1
            stack[sp] = node_left[ni]
            sp += 1
    return best_tri, best_t, best_u, best_v


@njit(cache=True, parallel=True)
def _bvh_ray_batch(origins, dirs, verts, tris, node_min, node_max, node_left,
                   node_right, node_start, node_count, order,
                   out_tri, out_tuv):
    for i in prange(origins.shape[0]):
        ti, t, u, v = _bvh_ray(
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2], verts, tris,
            node_min, node_max, node_left, node_right,
            node_start, node_count, order)
        out_tri[i] = ti
        out_tuv[i, 0] = t
        out_tuv[i, 1] = u
        out_tuv[i, 2] = v


# --- query API -------------------------------------------------------------


@dataclass
class ClosestPoint:
    point: np.ndarray
    triangle_id: int
    distance: float


@dataclass
class RayHit:
    point: np.ndarray
    triangle_id: int
    t: float
    barycentrics: np.ndarray  # (3,), sums to 1


def closest_point_on_mesh(p, bvh: Bvh) -> ClosestPoint:
    """Globally closest surface point to p. Ties go to the lowest triangle id."""
    p = np.asarray(p, dtype=np.float64)
    d, ti, qx, qy, qz = _bvh_closest(
        p[0], p[1], p[2], bvh.vertices, bvh.triangles,
        bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right,
        bvh.node_start, bvh.node_count, bvh.order)
    return ClosestPoint(np.array([qx, qy, qz]), int(ti), float(np.sqrt(d)))


def closest_points_on_mesh(points, bvh: Bvh):
    """Batched closest-point query. Returns (points (Q,3), tri_ids (Q,), dists (Q,))."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    q = np.empty_like(pts)
    d = np.empty(len(pts))
    tri = np.empty(len(pts), dtype=np.int64)
    _bvh_closest_batch(pts, bvh.vertices, bvh.triangles,
                       bvh.node_min, bvh.node_max, bvh.node_left,
                       bvh.node_right, bvh.node_start, bvh.node_count,
                       bvh.order, d, tri, q)
    return q, tri, np.sqrt(d)


def ray_mesh_intersect(origin, direction, mesh: Mesh, bvh: Bvh | None = None):
    """Nearest positive-t ray/mesh intersection, or None on a miss.

    direction must be normalized. Pass a prebuilt bvh to skip construction.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise InvalidInputError("ray direction must be a unit vector")
    if bvh is None:
        bvh = build_bvh(mesh)
    o = np.asarray(origin, dtype=np.float64)
    ti, t, u, v = _bvh_ray(
        o[0], o[1], o[2], direction[0], direction[1], direction[2],
        bvh.vertices, bvh.triangles, bvh.node_min, bvh.node_max,
        bvh.node_left, bvh.node_right, bvh.node_start, bvh.node_count,
        bvh.order)
    if ti < 0:
        return None
    bary = np.array([1.0 - u - v, u, v])
    return RayHit(o + t * direction, int(ti), float(t), bary)


def ray_mesh_intersect_batch(origins, directions, bvh: Bvh):
    """Batched ray query: returns (tri_ids (Q,), t (Q,), bary (Q,3)); tri -1 = miss."""
    o = np.ascontiguousarray(origins, dtype=np.float64)
    d = np.ascontiguousarray(directions, dtype=np.float64)
    tri = np.empty(len(o), dtype=np.int64)
    tuv = np.empty((len(o), 3))
    _bvh_ray_batch(o, d, bvh.vertices, bvh.triangles, bvh.node_min,
                   bvh.node_max, bvh.node_left, bvh.node_right,
                   bvh.node_start, bvh.node_count, bvh.order, tri, tuv)
    bary = np.stack([1.0 - tuv[:, 1] - tuv[:, 2], tuv[:, 1], tuv[:, 2]], axis=1)
    return tri, tuv[:, 0], bary


# ---------------------------------------------------------------------------
# Surface sampling and Hausdorff distance


def sample_surface(mesh: Mesh, samples_per_triangle: int, seed: int = 0) -> np.ndarray:
    """Uniform samples inside each triangle, samples_per_triangle per face.

    Sample sets are nested: the first k rounds of an n-round draw equal the
    k-round draw for the same seed, so refining the count only adds points.
    """
    if samples_per_triangle < 1:
        raise InvalidInputError("samples_per_triangle must be >= 1")
    corners = mesh.triangle_corners()
    rng = np.random.default_rng(seed)
    out = np.empty((samples_per_triangle, mesh.n_triangles, 3))
    for k in range(samples_per_triangle):
        r = rng.random((mesh.n_triangles, 2))
        s = np.sqrt(r[:, 0:1])
        w0 = 1.0 - s
        w1 = s * (1.0 - r[:, 1:2])
        w2 = s * r[:, 1:2]
        out[k] = w0 * corners[:, 0] + w1 * corners[:, 1] + w2 * corners[:, 2]
    return out.reshape(-1, 3)


def _directed_max_distance(points: np.ndarray, target: Bvh) -> float:
    _, _, d = closest_points_on_mesh(points, target)
    return float(d.max())


def hausdorff_distance(a: Mesh, b: Mesh, samples_per_triangle: int = 16,
                       seed: int = 0, use_vertices: bool = False):
    """Sampled Hausdorff distance between two surfaces.

    Returns (forward, backward, symmetric): forward is the max over sampled
    points of a of the distance to surface b; symmetric = max(forward, backward).
    With use_vertices=True the mesh vertices are the sample set instead.
    """
    if a.n_triangles == 0 or b.n_triangles == 0:
        raise InvalidInputError("hausdorff_distance needs non-empty meshes")
    if not use_vertices and samples_per_triangle < 1:
        raise InvalidInputError("samples_per_triangle must be >= 1")
    bvh_a = build_bvh(a)
    bvh_b = build_bvh(b)
    if use_vertices:
        pts_a, pts_b = a.vertices, b.vertices
    else:
        pts_a = sample_surface(a, samples_per_triangle, seed)
        pts_b = sample_surface(b, samples_per_triangle, seed)
    forward = _directed_max_distance(pts_a, bvh_b)
    backward = _directed_max_distance(pts_b, bvh_a)
    return forward, backward, max(forward, backward)


# ---------------------------------------------------------------------------
# Wavefront OBJ I/O (positions, normals, UVs, triangles) + JSON label sidecar


def _labels_path(path: Path) -> Path:
    return path.with_suffix(".labels.json")


def save_obj(mesh: Mesh, path, mtl_name: str | None = None,
             texture_name: str | None = None) -> None:
    """Write an OBJ (v/vt/vn shared indices). Labels go to a JSON sidecar.

    When texture_name is given, a minimal .mtl referencing it is emitted and
    every face uses that material, so standard viewers pick up the texture.
    """
    path = Path(path)
    lines = []
    if texture_name is not None:
        mtl_name = mtl_name or (path.stem + ".mtl")
        lines.append(f"mtllib {mtl_name}")
    for v in mesh.vertices:
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    if mesh.uvs is not None:
        for t in mesh.uvs:
            lines.append(f"vt {float(t[0])!r} {float(t[1])!r}")
    if mesh.normals is not None:
        for n in mesh.normals:
            lines.append(f"vn {float(n[0])!r} {float(n[1])!r} {float(n[2])!r}")
    if texture_name is not None:
        lines.append("usemtl baked")
    has_uv = mesh.uvs is not None
    has_n = mesh.normals is not None
    for tri in mesh.triangles:
        i, j, k = (int(tri[0]) + 1, int(tri[1]) + 1, int(tri[2]) + 1)
        if has_uv and has_n:
            lines.append(f"f {i}/{i}/{i} {j}/{j}/{j} {k}/{k}/{k}")
        elif has_uv:
            lines.append(f"f {i}/{i} {j}/{j} {k}/{k}")
        elif has_n:
            lines.append(f"f {i}//{i} {j}//{j} {k}//{k}")
        else:
            lines.append(f"f {i} {j} {k}")
    path.write_text("\n".join(lines) + "\n")
    if texture_name is not None:
        mtl = (
            "newmtl baked\n"
            "Ka 1.0 1.0 1.0\nKd 1.0 1.0 1.0\nKs 0.0 0.0 0.0\n"
            f"map_Kd {texture_name}\n"
        )
        (path.parent / mtl_name).write_text(mtl)
    if mesh.labels:
        payload = {"labels": {k: [int(i) for i in v] for k, v in sorted(mesh.labels.items())}}
        _labels_path(path).write_text(json.dumps(payload, sort_keys=True))


def load_obj(path) -> Mesh:
    """Read an OBJ with per-vertex attributes; fans polygons into triangles.

    vt/vn indices are assumed to follow the vertex index (the layout save_obj
    emits); mismatched counts fall back to recomputed normals / no UVs.
    """
    path = Path(path)
    verts, uvs, normals, tris = [], [], [], []
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif tag == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif tag == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
    vertices = np.asarray(verts, dtype=np.float64)
    mesh = Mesh(
        vertices=vertices,
        triangles=np.asarray(tris, dtype=np.int32).reshape(-1, 3),
        normals=np.asarray(normals) if len(normals) == len(verts) else None,
        uvs=np.asarray(uvs) if len(uvs) == len(verts) else None,
    )
    if mesh.normals is None:
        mesh.recompute_normals()
    sidecar = _labels_path(path)
    if sidecar.exists():
        payload = json.loads(sidecar.read_text())
        mesh.labels = {
            k: np.asarray(v, dtype=np.int64)
            for k, v in payload.get("labels", {}).items()
        }
    return mesh
