"""Bounding volume hierarchy for ray-triangle queries.

The tree is built once per mesh (median split on the longest centroid
axis) and stored as flat arrays so traversal can run as numba kernels
over large ray batches. Degenerate triangles never report hits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

LEAF_SIZE = 4
_STACK = 128


def _build_nodes(vertices: np.ndarray, faces: np.ndarray):
    ntris = len(faces)
    tri_lo = np.minimum.reduce([vertices[faces[:, k]] for k in range(3)])
    tri_hi = np.maximum.reduce([vertices[faces[:, k]] for k in range(3)])
    centroids = 0.5 * (tri_lo + tri_hi)

    order = np.arange(ntris, dtype=np.int32)
    bounds_lo, bounds_hi = [], []
    left, right, start, count = [], [], [], []

    def new_node():
        bounds_lo.append(np.zeros(3))
        bounds_hi.append(np.zeros(3))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    # iterative build; stack holds (node, lo, hi) index ranges into `order`
    root = new_node()
    stack = [(root, 0, ntris)]
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        bounds_lo[node] = tri_lo[idx].min(axis=0)
        bounds_hi[node] = tri_hi[idx].max(axis=0)
        if hi - lo <= LEAF_SIZE:
            start[node], count[node] = lo, hi - lo
            continue
        extent = centroids[idx].max(axis=0) - centroids[idx].min(axis=0)
        axis = int(np.argmax(extent))
        local = np.argsort(centroids[idx, axis], kind="stable").astype(np.int32)
        order[lo:hi] = idx[local]
        mid = lo + (hi - lo) // 2
        lc, rc = new_node(), new_node()
        left[node], right[node] = lc, rc
        stack.append((lc, lo, mid))
        stack.append((rc, mid, hi))

    return (
        np.asarray(bounds_lo),
        np.asarray(bounds_hi),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.asarray(start, dtype=np.int32),
        np.asarray(count, dtype=np.int32),
        order,
    )


@njit(cache=True)
def _ray_tri(ox, oy, oz, dx, dy, dz, a, e1, e2):
    """Moller-Trumbore; returns (t, u, v) with t < 0 meaning no hit."""
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) < 1e-14:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    tx = ox - a[0]
    ty = oy - a[1]
    tz = oz - a[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -1e-9 or u > 1.0 + 1e-9:
        return -1.0, 0.0, 0.0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -1e-9 or u + v > 1.0 + 1e-9:
        return -1.0, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    return t, u, v


@njit(cache=True)
def _slab_hit(lox, loy, loz, hix, hiy, hiz, ox, oy, oz, ix, iy, iz, tmax):
    t0 = (lox - ox) * ix
    t1 = (hix - ox) * ix
    tmin = min(t0, t1)
    tmx = max(t0, t1)
    t0 = (loy - oy) * iy
    t1 = (hiy - oy) * iy
    tmin = max(tmin, min(t0, t1))
    tmx = min(tmx, max(t0, t1))
    t0 = (loz - oz) * iz
    t1 = (hiz - oz) * iz
    tmin = max(tmin, min(t0, t1))
    tmx = min(tmx, max(t0, t1))
    return tmx >= max(tmin, 0.0) and tmin <= tmax


@njit(cache=True, parallel=True)
def _closest_kernel(blo, bhi, left, right, start, count, order, va, e1, e2,
                    origins, dirs, t_out, tri_out, u_out, v_out):
    nrays = origins.shape[0]
    block = 2048
    nblocks = (nrays + block - 1) // block
    for b in prange(nblocks):
        stack = np.empty(_STACK, dtype=np.int32)
        for r in range(b * block, min((b + 1) * block, nrays)):
            ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
            dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
            ix = 1.0 / dx if dx != 0.0 else np.inf
            iy = 1.0 / dy if dy != 0.0 else np.inf
            iz = 1.0 / dz if dz != 0.0 else np.inf
            best_t = np.inf
            best_tri = -1
            best_u = 0.0
            best_v = 0.0
            top = 0
            stack[top] = 0
            top += 1
            while top > 0:
                top -= 1
                node = stack[top]
                if not _slab_hit(blo[node, 0], blo[node, 1], blo[node, 2],
                                 bhi[node, 0], bhi[node, 1], bhi[node, 2],
                                 ox, oy, oz, ix, iy, iz, best_t):
                    continue
                if left[node] < 0:
                    for k in range(start[node], start[node] + count[node]):
                        tri = order[k]
                        t, u, v = _ray_tri(ox, oy, oz, dx, dy, dz, va[tri], e1[tri], e2[tri])
                        if 1e-12 < t < best_t:
                            best_t = t
                            best_tri = tri
                            best_u = u
                            best_v = v
                else:
                    stack[top] = left[node]
                    top += 1
                    stack[top] = right[node]
                    top += 1
            t_out[r] = best_t
            tri_out[r] = best_tri
            u_out[r] = best_u
            v_out[r] = best_v


@njit(cache=True, parallel=True)
def _occluded_kernel(blo, bhi, left, right, start, count, order, va, e1, e2,
                     origins, dirs, tmax, out):
    nrays = origins.shape[0]
    block = 2048
    nblocks = (nrays + block - 1) // block
    for b in prange(nblocks):
        stack = np.empty(_STACK, dtype=np.int32)
        for r in range(b * block, min((b + 1) * block, nrays)):
            ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
            dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
            ix = 1.0 / dx if dx != 0.0 else np.inf
            iy = 1.0 / dy if dy != 0.0 else np.inf
            iz = 1.0 / dz if dz != 0.0 else np.inf
            limit = tmax[r]
            hit = False
            top = 0
            stack[top] = 0
            top += 1
            while top > 0 and not hit:
                top -= 1
                node = stack[top]
                if not _slab_hit(blo[node, 0], blo[node, 1], blo[node, 2],
                                 bhi[node, 0], bhi[node, 1], bhi[node, 2],
                                 ox, oy, oz, ix, iy, iz, limit):
                    continue
                if left[node] < 0:
                    for k in range(start[node], start[node] + count[node]):
                        tri = order[k]
                        t, u, v = _ray_tri(ox, oy, oz, dx, dy, dz, va[tri], e1[tri], e2[tri])
                        if 1e-12 < t < limit:
                            hit = True
                            break
                else:
                    stack[top] = left[node]
                    top += 1
                    stack[top] = right[node]
                    top += 1
            out[r] = hit


@dataclass
class AccelStructure:
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    va: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @classmethod
    def build(cls, vertices: np.ndarray, faces: np.ndarray) -> "AccelStructure":
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int32)
        blo, bhi, left, right, start, count, order = _build_nodes(vertices, faces)
        va = np.ascontiguousarray(vertices[faces[:, 0]])
        e1 = np.ascontiguousarray(vertices[faces[:, 1]] - vertices[faces[:, 0]])
        e2 = np.ascontiguousarray(vertices[faces[:, 2]] - vertices[faces[:, 0]])
        return cls(blo, bhi, left, right, start, count, order, va, e1, e2)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Closest hit for a ray batch.

        Returns (t, tri, u, v); t = inf and tri = -1 where nothing is hit.
        u, v are barycentric weights of the second and third face vertex.
        """
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        n = len(origins)
        t = np.empty(n)
        tri = np.empty(n, dtype=np.int64)
        u = np.empty(n)
        v = np.empty(n)
        _closest_kernel(self.bounds_lo, self.bounds_hi, self.left, self.right,
                        self.start, self.count, self.order, self.va, self.e1, self.e2,
                        origins, dirs, t, tri, u, v)
        return t, tri, u, v

    def occluded(self, origins: np.ndarray, dirs: np.ndarray, t_max=np.inf) -> np.ndarray:
        """True where any triangle intersects the ray in (0, t_max).

        Callers are responsible for offsetting origins off the surface
        (see Scene.shadow_eps).
        """
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        n = len(origins)
        tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
        tmax = np.ascontiguousarray(tmax)
        out = np.empty(n, dtype=np.bool_)
        _occluded_kernel(self.bounds_lo, self.bounds_hi, self.left, self.right,
                         self.start, self.count, self.order, self.va, self.e1, self.e2,
                         origins, dirs, tmax, out)
        return out


def occluded(accel: AccelStructure, origin, direction, t_max=np.inf) -> bool:
    """Single-ray convenience wrapper over AccelStructure.occluded."""
    return bool(accel.occluded(np.asarray(origin)[None], np.asarray(direction)[None],
                               np.asarray([t_max]))[0])
