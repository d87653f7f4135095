"""Deterministic synthetic building scenes with ground truth.

A scene is a box-shaped building with pilasters and a roof parapet, a camera
rig around it, surface points with their exact projections, and the noisy
pairwise matches and anchor annotations the pipeline consumes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .camera import Camera, Intrinsics, Pose, project_batch
from .errors import InvalidSpec
from .io import (
    AnchorAnnotation,
    ImageInfo,
    write_anchor,
    write_cameras,
    write_images,
    write_matches,
    write_points,
)
from .mesh import TriangleMesh, intersect_rays_mesh, write_obj
from .tracks import FeatureMatch, Track, TrackGraph

WIDTH, HEIGHT = 640, 480
VISIBILITY_TOL = 1e-6


class Rig(str, enum.Enum):
    ORBIT = "orbit"
    TIMELAPSE = "timelapse"
    TWO_CLUSTER = "two-cluster"


@dataclass(frozen=True)
class SceneSpec:
    camera_count: int = 10
    point_count: int = 300
    rig: Rig = Rig.ORBIT
    noise_px: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0
    anchor_perturb_deg: float = 3.0
    anchor_perturb_center: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "rig", Rig(self.rig))
        if self.camera_count < 2:
            raise InvalidSpec("camera_count must be >= 2")
        if self.rig == Rig.TWO_CLUSTER and self.camera_count < 4:
            raise InvalidSpec("two-cluster rig needs at least 4 cameras")
        if self.point_count < 8:
            raise InvalidSpec("point_count must be >= 8")
        if self.noise_px < 0 or not math.isfinite(self.noise_px):
            raise InvalidSpec("noise_px must be a non-negative number")
        if not 0 <= self.outlier_fraction < 1:
            raise InvalidSpec("outlier_fraction must lie in [0, 1)")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    mesh: TriangleMesh
    cameras: dict  # image id -> true Camera
    images: dict  # image id -> ImageInfo
    points: np.ndarray  # (n, 3)
    tracks: TrackGraph  # exact observations
    observations: dict  # (point index, image id) -> noisy pixel
    matches: list
    anchors: dict  # image id -> AnchorAnnotation
    provider: dict  # image id -> AnchorAnnotation
    eval_points: np.ndarray
    clusters: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.spec.seed

    def write(self, directory) -> Path:
        d = Path(directory)
        (d / "anchors").mkdir(parents=True, exist_ok=True)
        (d / "provider").mkdir(exist_ok=True)
        write_images(d / "images.txt", self.images)
        write_matches(d / "matches.txt", self.matches)
        write_obj(self.mesh, d / "mesh.obj")
        for iid, ann in self.anchors.items():
            write_anchor(d / "anchors" / f"{iid}.txt", ann)
        for iid, ann in self.provider.items():
            write_anchor(d / "provider" / f"{iid}.txt", ann)
        write_cameras(d / "truth_cameras.json", self.cameras)
        write_points(d / "eval_points.txt", self.eval_points)
        return d


# ---------------------------------------------------------------------------
# geometry


def _box(lo, hi, skip_bottom=True):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    v = np.array([[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]]
                  for i in range(8)])
    quads = [(4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    if not skip_bottom:
        quads.append((0, 2, 3, 1))
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return v, np.array(tris)


def building_mesh() -> TriangleMesh:
    """6 x 4 x 4 building (z up) with pilasters on every wall and a roof parapet."""
    parts = [_box((-3, -2, 0), (3, 2, 4))]
    for x in (-2.0, 0.0, 2.0):
        parts.append(_box((x - 0.3, -2.4, 0), (x + 0.3, -2.0, 3.4)))
        parts.append(_box((x - 0.3, 2.0, 0), (x + 0.3, 2.4, 3.4)))
    for y in (-1.0, 1.0):
        parts.append(_box((-3.4, y - 0.3, 0), (-3.0, y + 0.3, 3.4)))
        parts.append(_box((3.0, y - 0.3, 0), (3.4, y + 0.3, 3.4)))
    parts.append(_box((-1.5, -1.0, 4.0), (1.5, 1.0, 5.0)))  # rooftop structure
    verts, tris, off = [], [], 0
    for v, t in parts:
        verts.append(v)
        tris.append(t + off)
        off += len(v)
    return TriangleMesh(np.vstack(verts), np.vstack(tris))


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    c = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - c
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_matrix(np.stack([x, y, z]), c)


def _rotate_small(pose: Pose, rng, max_deg) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return pose.rotated(axis * math.radians(rng.uniform(-max_deg, max_deg)))


def _orbit_cameras(ids, azimuths, rng, radius=12.0, height=5.0, fov=50.0):
    cams = {}
    target = np.array([0.0, 0.0, 2.0])
    for iid, az in zip(ids, azimuths):
        r = radius + rng.uniform(-1.0, 1.0)
        c = np.array([r * math.cos(az), r * math.sin(az), height + rng.uniform(-1.0, 1.0)])
        pose = look_at(c, target + rng.uniform(-0.5, 0.5, 3))
        cams[iid] = Camera(Intrinsics.from_fov(fov, WIDTH, HEIGHT), pose)
    return cams


def _rig_cameras(spec: SceneSpec, rng):
    n = spec.camera_count
    ids = [f"img{i:02d}" for i in range(n)]
    if spec.rig == Rig.ORBIT:
        az = np.radians(-90.0 + np.linspace(-75.0, 75.0, n))
        return _orbit_cameras(ids, az, rng), [ids]
    if spec.rig == Rig.TIMELAPSE:
        base = _orbit_cameras(ids[:1], [math.radians(-90.0)], rng)[ids[0]]
        cams = {ids[0]: base}
        for iid in ids[1:]:
            pose = _rotate_small(base.pose, rng, 4.0)
            cams[iid] = Camera(Intrinsics.from_fov(rng.uniform(42.0, 58.0), WIDTH, HEIGHT), pose)
        return cams, [ids]
    half = n // 2
    groups = [ids[:half], ids[half:]]
    cams = {}
    for group, centre in zip(groups, (-90.0, 90.0)):
        az = np.radians(centre + np.linspace(-25.0, 25.0, len(group)))
        cams.update(_orbit_cameras(group, az, rng))
    return cams, groups


def _sample_surface(mesh: TriangleMesh, rng, count):
    tri = rng.choice(len(mesh), size=count, p=mesh.areas / mesh.areas.sum())
    a, b = rng.random(count), rng.random(count)
    flip = a + b > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    v = mesh.vertices[mesh.triangles[tri]]
    return v[:, 0] + a[:, None] * (v[:, 1] - v[:, 0]) + b[:, None] * (v[:, 2] - v[:, 0])


def visible_pixels(mesh: TriangleMesh, camera: Camera, points, margin=2.0):
    """Exact projections and a mask of points that are in frame and unoccluded."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    k = camera.intrinsics
    uv, z = project_batch(camera.pose.R, camera.pose.c, k.focal_px, k.k1, k.k2, k.principal_point, P)
    ok = (z > 0.1) & (uv[:, 0] >= margin) & (uv[:, 0] <= k.width - margin) \
        & (uv[:, 1] >= margin) & (uv[:, 1] <= k.height - margin)
    idx = np.flatnonzero(ok)
    if len(idx):
        d = P[idx] - camera.pose.c
        dist = np.linalg.norm(d, axis=1)
        hit, _ = intersect_rays_mesh(mesh, np.broadcast_to(camera.pose.c, d.shape), d / dist[:, None])
        ok[idx] = hit >= dist * (1 - VISIBILITY_TOL) - VISIBILITY_TOL
    return uv, ok


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    mesh = building_mesh()
    cameras, clusters = _rig_cameras(spec, rng)
    ids = list(cameras)
    cluster_of = {iid: ci for ci, group in enumerate(clusters) for iid in group}

    # surface points seen by at least two cameras of one cluster
    points, obs = [], []
    for _ in range(100):
        if len(points) >= spec.point_count:
            break
        cand = _sample_surface(mesh, rng, 4 * spec.point_count)
        vis = {iid: visible_pixels(mesh, cameras[iid], cand) for iid in ids}
        for j in range(len(cand)):
            seen = {iid: vis[iid][0][j] for iid in ids if vis[iid][1][j]}
            counts = np.bincount([cluster_of[i] for i in seen], minlength=len(clusters))
            if counts.max() >= 2:
                points.append(cand[j])
                obs.append(seen)
                if len(points) >= spec.point_count:
                    break
    if len(points) < spec.point_count:
        raise InvalidSpec("could not place enough co-visible points for this rig")
    points = np.array(points)

    tracks = TrackGraph([Track({iid: tuple(px) for iid, px in seen.items()}, point=points[j].copy(),
                               source="truth") for j, seen in enumerate(obs)])
    noisy = {}
    for j, seen in enumerate(obs):
        for iid in ids:
            if iid in seen:
                noisy[(j, iid)] = tuple(seen[iid] + rng.normal(0.0, spec.noise_px, 2)) if spec.noise_px \
                    else tuple(seen[iid])

    matches = []
    for a_i, a in enumerate(ids):
        for b in ids[a_i + 1:]:
            if cluster_of[a] != cluster_of[b]:
                continue
            for j, seen in enumerate(obs):
                if a in seen and b in seen:
                    matches.append(FeatureMatch(a, b, noisy[(j, a)], noisy[(j, b)]))
    n_out = int(round(spec.outlier_fraction * len(matches)))
    for k in sorted(rng.choice(len(matches), size=n_out, replace=False)) if n_out else []:
        m = matches[k]
        bogus = (float(rng.uniform(0, WIDTH)), float(rng.uniform(0, HEIGHT)))
        matches[k] = FeatureMatch(m.image_a, m.image_b, m.pixel_a, bogus)

    images = {}
    for iid, cam in cameras.items():
        images[iid] = ImageInfo(iid, WIDTH, HEIGHT, cam.intrinsics.focal_px)

    def annotation(iid):
        cam = cameras[iid]
        uv, ok = visible_pixels(mesh, cam, mesh.vertices, margin=5.0)
        idx = np.flatnonzero(ok)
        verts = mesh.vertices[idx]
        _, keep = np.unique(np.round(verts, 9), axis=0, return_index=True)
        idx = idx[np.sort(keep)]
        px = uv[idx] + (rng.normal(0.0, spec.noise_px, (len(idx), 2)) if spec.noise_px else 0.0)
        init = _rotate_small(cam.pose, rng, spec.anchor_perturb_deg)
        dc = rng.normal(size=3)
        init = Pose(init.quaternion, tuple(init.c + spec.anchor_perturb_center * dc / np.linalg.norm(dc)))
        fov = math.degrees(2 * math.atan(0.5 * WIDTH / cam.intrinsics.focal_px))
        return AnchorAnnotation(iid, init, fov, px, mesh.vertices[idx].copy())

    anchors = {clusters[0][0]: annotation(clusters[0][0])}
    provider = {group[0]: annotation(group[0]) for group in clusters}

    order = np.argsort(points[:, 0] + 1e-3 * points[:, 2], kind="stable")
    eval_idx = order[np.linspace(0, len(order) - 1, 7).round().astype(int)]
    return SyntheticScene(spec, mesh, cameras, images, points, tracks, noisy, matches, anchors, provider,
                          points[eval_idx].copy(), clusters)
