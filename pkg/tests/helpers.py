"""Shared fixtures: small camera rigs, two-view match sets and cached pipeline runs."""

from __future__ import annotations

import functools

import numpy as np

from anchorsfm.camera import Camera, Intrinsics, Pose, project
from anchorsfm.tracks import FeatureMatch


# filled by the acceptance tests, printed in the terminal summary
ACCEPTANCE_LINES = []


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    c = np.asarray(center, float)
    z = np.asarray(target, float) - c
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_matrix(np.stack([x, y, z]), c)


def camera(center, target=(0.0, 0.0, 0.0), f=600.0, k1=0.0, k2=0.0, width=640, height=480) -> Camera:
    return Camera(Intrinsics(f, k1, k2, width, height), look_at(center, target))


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def perturb_pose(pose: Pose, rng, deg: float, dist: float) -> Pose:
    dr = rng.normal(size=3)
    dr *= np.radians(deg) / np.linalg.norm(dr)
    dc = rng.normal(size=3)
    dc *= dist / np.linalg.norm(dc)
    return Pose(tuple(pose.rotated(dr).quaternion), tuple(pose.c + dc))


def rotation_angle_deg(Ra, Rb) -> float:
    c = (np.trace(Ra @ Rb.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def visible(cam: Camera, X) -> bool:
    xc = cam.pose.to_camera(X)[0]
    if xc[2] <= 0.1:
        return False
    return bool(cam.intrinsics.in_bounds(project(cam, X))[0])


def two_view_pair(seed=0, n=100, noise=0.0, planar=False, baseline=3.0):
    """Two cameras viewing a point cloud around the origin plus exact match pixels."""
    rng = np.random.default_rng(seed)
    a = camera((-baseline / 2, -10.0, 1.0))
    b = camera((baseline / 2, -10.0, 0.5), target=(0.3, 0.0, 0.2), f=650.0)
    pts, pa, pb = [], [], []
    while len(pts) < n:
        X = rng.uniform(-3, 3, 3)
        if planar:
            X[1] = 0.3 * X[0] - 0.2 * X[2]
        if visible(a, X) and visible(b, X):
            pts.append(X)
            pa.append(project(a, X) + rng.normal(0, noise, 2))
            pb.append(project(b, X) + rng.normal(0, noise, 2))
    return a, b, np.array(pts), np.array(pa), np.array(pb)


def to_matches(pa, pb, ia="a", ib="b"):
    return [FeatureMatch(ia, ib, tuple(u), tuple(v)) for u, v in zip(pa, pb)]


@functools.lru_cache(maxsize=None)
def scene(rig="orbit", noise=0.0, outliers=0.0, seed=7, cameras=10, points=300):
    from anchorsfm.synth import SceneSpec, generate_scene
    return generate_scene(SceneSpec(cameras, points, rig, noise, outliers, seed))


class SceneProvider:
    """Serves the synthetic scene's held-back annotations."""

    def __init__(self, scn):
        self.scene = scn
        self.requests = []

    def request(self, image_id, points=None):
        self.requests.append(image_id)
        return self.scene.provider.get(image_id)


@functools.lru_cache(maxsize=None)
def pipeline_run(rig="orbit", noise=0.0, outliers=0.0, seed=7, with_provider=False, mode="hard"):
    """Run the pipeline once per configuration and share the result between tests."""
    import time

    from anchorsfm.pipeline import PipelineOptions, run_pipeline
    scn = scene(rig, noise, outliers, seed)
    provider = SceneProvider(scn) if with_provider else None
    t0 = time.perf_counter()
    state = run_pipeline(scn.images, scn.matches, scn.anchors, scn.mesh, provider, PipelineOptions(mode=mode))
    return scn, state, time.perf_counter() - t0


def planted_fundamental_matches(seed, n_in=60, n_out=40, noise=0.25):
    """True matches of a two-view pair mixed with uniformly random pixel pairs; returns (matches, is_true)."""
    rng = np.random.default_rng(seed)
    _, _, _, pa, pb = two_view_pair(seed=seed, n=n_in, noise=noise)
    qa = rng.uniform((0, 0), (640, 480), (n_out, 2))
    qb = rng.uniform((0, 0), (640, 480), (n_out, 2))
    order = rng.permutation(n_in + n_out)
    A = np.vstack([pa, qa])[order]
    B = np.vstack([pb, qb])[order]
    truth = (np.arange(n_in + n_out) < n_in)[order]
    return to_matches(A, B), truth


def pnp_setup(seed=0, n=20, k1=0.0):
    """A camera, n points in front of it and their exact pixels."""
    rng = np.random.default_rng(seed)
    cam = camera((1.0, -8.0, 2.0), target=(0.2, 0.0, 0.5), f=520.0, k1=k1)
    pts, px = [], []
    while len(pts) < n:
        X = rng.uniform(-2, 2, 3)
        if visible(cam, X):
            pts.append(X)
            px.append(project(cam, X))
    return cam, np.array(pts), np.array(px)


def exact_lines(cam, other, pts):
    """Epipolar lines in ``cam`` of the points as seen by ``other`` (oracle fundamental matrix)."""
    import oracles
    from anchorsfm.geometry import EpipolarLine
    F = oracles.fundamental_from_cameras(
        oracles.camera_matrix(other.intrinsics.focal_px, other.width, other.intrinsics.height),
        other.pose.R, other.pose.c,
        oracles.camera_matrix(cam.intrinsics.focal_px, cam.width, cam.intrinsics.height), cam.pose.R, cam.pose.c)
    return [EpipolarLine.from_vector(F @ np.array([*project(other, X), 1.0])) for X in pts]


def planted_corruption_case(seed, n=12, n_bad=2, shift=20.0, init_deg=5.0, init_dist=0.2):
    """Correspondences with a few shifted pixels plus exact epipolar lines from a second view."""
    from anchorsfm.pnp import Correspondence2D3D
    rng = np.random.default_rng(seed)
    cam, pts, px = pnp_setup(seed=seed, n=n)
    other = camera((-3.0, -7.0, 3.0), target=(0.0, 0.0, 0.3), f=560.0)
    lines = exact_lines(cam, other, pts)
    px = px.copy()
    bad = rng.choice(n, n_bad, replace=False)
    ang = rng.uniform(0, 2 * np.pi, n_bad)
    px[bad] += shift * np.column_stack([np.cos(ang), np.sin(ang)])
    corr = [Correspondence2D3D(tuple(u), tuple(X), line) for u, X, line in zip(px, pts, lines)]
    init = perturb_pose(cam.pose, rng, init_deg, init_dist)
    return cam, corr, init


def ba_scene(seed=0, noise=0.5, deg=2.0, dist=0.1, n_cams=10, n_pts=300, k=(0.01, -0.005), point_noise=0.05):
    """Orbit-arc cameras looking at a point cube; returns (truth, perturbed cameras, tracks).

    Camera ``img0`` is left unperturbed and serves as the anchor.
    """
    from anchorsfm.tracks import Track
    rng = np.random.default_rng(seed)
    truth = {}
    for i in range(n_cams):
        a = 2 * np.pi * i / n_cams * 0.4
        truth[f"img{i}"] = camera((12 * np.cos(a), 12 * np.sin(a), 3.0), k1=k[0], k2=k[1])
    X = rng.uniform(-3, 3, (n_pts, 3))
    tracks = []
    for x in X:
        obs = {}
        for cid, cam in truth.items():
            uv = project(cam, x)
            if cam.intrinsics.in_bounds(uv)[0]:
                obs[cid] = tuple(uv + rng.normal(0, noise, 2))
        tracks.append(Track(obs, point=tuple(x + rng.normal(0, point_noise, 3)), source="triangulated"))
    init = {cid: (c if cid == "img0" else c.with_pose(perturb_pose(c.pose, rng, deg, dist))) for cid, c in truth.items()}
    return truth, init, tracks


def occlusion_configuration(seed, n_points=20):
    """A random wall or box in front of a camera plus cloud points near it.

    Points sit on camera rays through visible surface samples, shifted up to 0.6 m toward the
    camera, with normals tilted up to 60 degrees from the hit face's normal.
    Returns (mesh, camera, points, normals).
    """
    import oracles
    from anchorsfm.mesh import TriangleMesh, box_mesh
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        R = random_rotation(rng)
        half = rng.uniform(1.0, 3.0, 2)
        corners = np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]]) * [*half, 0]
        mesh = TriangleMesh(corners @ R.T, [(0, 1, 2), (0, 2, 3)])
    else:
        lo = rng.uniform(-2.0, -0.5, 3)
        mesh = box_mesh(lo, lo + rng.uniform(1.0, 4.0, 3))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    cam = camera(direction * rng.uniform(6.0, 10.0), target=rng.normal(0, 0.3, 3), f=rng.uniform(400, 800))
    pts, normals = [], []
    areas = 0.5 * np.linalg.norm(np.cross(*(mesh.vertices[mesh.triangles[:, 1:]] -
                                           mesh.vertices[mesh.triangles[:, :1]]).transpose(1, 0, 2)), axis=1)
    for _ in range(50 * n_points):
        if len(pts) == n_points:
            break
        # aim at a random surface sample; the nearest hit along that ray may be another face
        a, b, c = mesh.vertices[mesh.triangles[rng.choice(len(areas), p=areas / areas.sum())]]
        u, v = rng.random(2)
        if u + v > 1:
            u, v = 1 - u, 1 - v
        target = a + u * (b - a) + v * (c - a)
        if not visible(cam, target):
            continue
        d = (target - cam.pose.c) / np.linalg.norm(target - cam.pose.c)
        t, tri = oracles.nearest_hit(cam.pose.c, d, mesh.vertices, mesh.triangles)
        if t is None or t < 1.5:
            continue
        pts.append(cam.pose.c + (t - rng.uniform(0.0, 0.6)) * d)
        n = mesh.normals[tri]
        axis = np.cross(n, rng.normal(size=3))
        axis /= np.linalg.norm(axis)
        ang = np.radians(rng.uniform(0, 60))
        normals.append(n * np.cos(ang) + np.cross(axis, n) * np.sin(ang))
    return mesh, cam, np.array(pts), np.array(normals)


def painted_occluder_scene(seed=0, n_images=5, size=(240, 320), rect=(80, 100, 140, 180)):
    """A smooth background time lapse shifted by integer homographies; the reference
    carries a painted rectangle. Returns (reference, [(image, H)], rectangle mask)."""
    rng = np.random.default_rng(seed)
    h, w = size
    pad = 8
    vs, us = np.mgrid[0:h + 2 * pad, 0:w + 2 * pad].astype(float)
    phase = rng.uniform(0, 2 * np.pi, 3)
    canvas = np.stack([0.35 + 0.15 * np.sin(us / 23.0 + phase[0]) * np.cos(vs / 31.0),
                       0.45 + 0.1 * np.cos(vs / 17.0 + phase[1]),
                       0.7 + 0.1 * np.sin((us + vs) / 29.0 + phase[2])], axis=-1)
    ref = canvas[pad:pad + h, pad:pad + w].copy()
    r0, c0, r1, c1 = rect
    truth = np.zeros((h, w), bool)
    truth[r0:r1, c0:c1] = True
    ref[truth] = (0.9, 0.15, 0.1)
    aligned = []
    for _ in range(n_images - 1):
        dx, dy = rng.integers(-pad, pad + 1, 2)
        img = canvas[pad + dy:pad + dy + h, pad + dx:pad + dx + w]
        # image pixel (u, v) shows canvas (u + dx, v + dy) = reference (u + dx, v + dy)
        H = np.array([[1.0, 0, dx], [0, 1.0, dy], [0, 0, 1.0]])
        aligned.append((img.copy(), H))
    return ref, aligned, truth
