"""Triangle meshes: validation, ray casting and a small OBJ reader/writer."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .camera import Ray

log = logging.getLogger(__name__)

MIN_TRIANGLE_AREA = 1e-12
MIN_HIT_DISTANCE = 1e-9


class TriangleMesh:
    """Vertices (n,3) and triangles (m,3) of vertex indices; normals follow winding."""

    def __init__(self, vertices, triangles):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=int).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices must be finite")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        v0, v1, v2 = (self.vertices[self.triangles[:, k]] for k in range(3))
        cross = np.cross(v1 - v0, v2 - v0)
        area = 0.5 * np.linalg.norm(cross, axis=1)
        bad = np.flatnonzero(area <= MIN_TRIANGLE_AREA)
        if len(bad):
            raise ValueError(f"degenerate triangle {bad[0]} (area {area[bad[0]]:.3g})")
        self.areas = area
        self.normals = cross / (2.0 * area[:, None])
        self._v0, self._e1, self._e2 = v0, v1 - v0, v2 - v0

    def __len__(self):
        return len(self.triangles)

    @property
    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def diameter(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def transformed(self, R, t, scale=1.0) -> "TriangleMesh":
        return TriangleMesh(scale * self.vertices @ np.asarray(R).T + np.asarray(t), self.triangles)


@dataclass(frozen=True)
class RayHit:
    point: np.ndarray
    triangle: int
    distance: float


def intersect_rays_mesh(mesh: TriangleMesh, origins, directions):
    """Nearest hit of each ray; returns (distance, triangle) with inf / -1 for misses.

    Vectorized Moller-Trumbore over all triangles (brute force, desk scale).
    Rays are processed in chunks to bound memory.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    directions = np.asarray(directions, dtype=float).reshape(-1, 3)
    n = len(origins)
    dist = np.full(n, np.inf)
    tri = np.full(n, -1, dtype=int)
    if len(mesh) == 0:
        return dist, tri
    chunk = max(1, 200000 // len(mesh))
    e1, e2, v0 = mesh._e1, mesh._e2, mesh._v0
    for s in range(0, n, chunk):
        o = origins[s:s + chunk, None, :]
        d = directions[s:s + chunk, None, :]
        p = np.cross(d, e2[None])
        det = np.sum(e1[None] * p, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tv = o - v0[None]
            u = np.sum(tv * p, axis=2) * inv
            q = np.cross(tv, e1[None])
            v = np.sum(d * q, axis=2) * inv
            t = np.sum(e2[None] * q, axis=2) * inv
            ok = (np.abs(det) > 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > MIN_HIT_DISTANCE)
        t = np.where(ok, t, np.inf)
        best = np.argmin(t, axis=1)
        bt = t[np.arange(len(best)), best]
        hit = np.isfinite(bt)
        dist[s:s + chunk] = bt
        tri[s:s + chunk] = np.where(hit, best, -1)
    return dist, tri


def intersect_ray_mesh(mesh: TriangleMesh, ray: Ray) -> Optional[RayHit]:
    """Nearest intersection farther than 1e-9 along ``ray``, or None."""
    origin = np.asarray(ray.origin, dtype=float)
    direction = np.asarray(ray.direction, dtype=float)
    dist, tri = intersect_rays_mesh(mesh, origin[None], direction[None])
    if tri[0] < 0:
        return None
    return RayHit(origin + dist[0] * direction, int(tri[0]), float(dist[0]))


def box_mesh(lo, hi) -> TriangleMesh:
    """Axis-aligned box with outward normals."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    corners = np.array([[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]]
                        for i in range(8)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners, tris)


def read_obj(path) -> TriangleMesh:
    """Read ``v x y z`` and triangular ``f i j k`` lines (1-based; ``i/t/n`` forms accepted)."""
    verts, faces = [], []
    ignored = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v" and len(parts) >= 4:
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f" and len(parts) == 4:
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
        else:
            ignored += 1
            log.warning("%s:%d: ignoring unsupported OBJ line %r", path, lineno, line.strip()[:40])
    if ignored:
        log.warning("%s: %d OBJ lines ignored", path, ignored)
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3))


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")
