"""Pinhole camera with two-coefficient radial distortion.

Conventions: world-to-camera is ``x_cam = R (X - center)``, the camera looks
along +z, image v grows downward, and the principal point sits at the image
center. Rotations are stored as unit quaternions ``[w, x, y, z]`` and updated
with left-multiplied axis-angle increments, ``R <- exp([delta]_x) R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DistortionNotInvertible, NonPositiveDepth

UNDISTORT_MAX_ITER = 50
UNDISTORT_TOL = 1e-12


@dataclass(frozen=True)
class Intrinsics:
    focal_px: float
    k1: float = 0.0
    k2: float = 0.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.focal_px > 0 and math.isfinite(self.focal_px)):
            raise ValueError(f"focal_px must be positive, got {self.focal_px}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if abs(self.k1) > 0.5 or abs(self.k2) > 0.5:
            raise ValueError(f"distortion outside |k| <= 0.5: k1={self.k1}, k2={self.k2}")

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "Intrinsics":
        """Focal length giving a horizontal field of view of ``fov_deg``."""
        focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(focal, 0.0, 0.0, width, height)

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])

    def in_bounds(self, pixels) -> np.ndarray:
        p = np.atleast_2d(pixels)
        return (p[:, 0] >= 0) & (p[:, 0] <= self.width) & (p[:, 1] >= 0) & (p[:, 1] <= self.height)


def quat_to_matrix(q) -> np.ndarray:
    return Rotation.from_quat(np.asarray(q, dtype=float), scalar_first=True).as_matrix()


def matrix_to_quat(R) -> np.ndarray:
    q = Rotation.from_matrix(R).as_quat(scalar_first=True)
    return q if q[0] >= 0 else -q


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def rotate_quat(q, delta) -> np.ndarray:
    """Left-compose the rotation ``exp(delta)`` onto quaternion ``q``."""
    r = Rotation.from_rotvec(np.asarray(delta, dtype=float)) * Rotation.from_quat(q, scalar_first=True)
    return normalize_quat(r.as_quat(scalar_first=True))


@dataclass(frozen=True)
class Pose:
    """Extrinsics as rotation quaternion plus camera center."""

    quaternion: tuple
    center: tuple

    def __post_init__(self):
        q = normalize_quat(self.quaternion)
        c = np.asarray(self.center, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(c))):
            raise ValueError("pose must be finite")
        object.__setattr__(self, "quaternion", tuple(float(v) for v in q))
        object.__setattr__(self, "center", tuple(float(v) for v in c))

    @classmethod
    def from_matrix(cls, R, center) -> "Pose":
        return cls(tuple(matrix_to_quat(R)), tuple(center))

    @classmethod
    def identity(cls) -> "Pose":
        return cls((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    @property
    def c(self) -> np.ndarray:
        return np.array(self.center)

    @property
    def translation(self) -> np.ndarray:
        return -self.R @ self.c

    @property
    def viewing_direction(self) -> np.ndarray:
        return self.R[2].copy()

    def rotated(self, delta) -> "Pose":
        return Pose(tuple(rotate_quat(self.quaternion, delta)), self.center)

    def to_camera(self, X) -> np.ndarray:
        return (np.atleast_2d(X) - self.c) @ self.R.T


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose = field(default_factory=Pose.identity)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    def with_pose(self, pose: Pose) -> "Camera":
        return replace(self, pose=pose)

    def with_intrinsics(self, intrinsics: Intrinsics) -> "Camera":
        return replace(self, intrinsics=intrinsics)

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "focal_px": k.focal_px,
            "k1": k.k1,
            "k2": k.k2,
            "width": k.width,
            "height": k.height,
            "quaternion": list(self.pose.quaternion),
            "center": list(self.pose.center),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        intr = Intrinsics(float(d["focal_px"]), float(d["k1"]), float(d["k2"]), int(d["width"]), int(d["height"]))
        return cls(intr, Pose(tuple(d["quaternion"]), tuple(d["center"])))


# ---------------------------------------------------------------------------
# distortion


def distort_normalized(k1: float, k2: float, xy) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    r2 = np.sum(xy * xy, axis=-1, keepdims=True)
    return xy * (1.0 + k1 * r2 + k2 * r2 * r2)


def undistort_normalized(intrinsics: Intrinsics, distorted) -> np.ndarray:
    """Invert the radial distortion by fixed-point iteration.

    Accepts a single 2-vector or an ``(n, 2)`` array.
    """
    return _undistort(intrinsics.k1, intrinsics.k2, distorted)


def _undistort(k1, k2, distorted) -> np.ndarray:
    xd = np.asarray(distorted, dtype=float)
    single = xd.ndim == 1
    xd = np.atleast_2d(xd)
    if np.all(k1 == 0) and np.all(k2 == 0):
        out = xd.copy()
        return out[0] if single else out
    x = xd.copy()
    for _ in range(UNDISTORT_MAX_ITER):
        r2 = np.sum(x * x, axis=1, keepdims=True)
        fac = 1.0 + k1 * r2 + k2 * r2 * r2
        if np.any(fac <= 0):
            break
        x_new = xd / fac
        step = np.max(np.abs(x_new - x))
        x = x_new
        if step <= UNDISTORT_TOL:
            return x[0] if single else x
    if np.max(np.abs(distort_normalized(k1, k2, x) - xd)) <= UNDISTORT_TOL:
        return x[0] if single else x
    raise DistortionNotInvertible(f"undistortion did not converge (k1={k1}, k2={k2})")


def undistort_jacobian(k1, k2, x):
    """Derivatives of the undistorted point with respect to (x_d, k1, k2).

    ``x`` is the undistorted solution, shape (n, 2). Returns ``(dx_dxd (n,2,2),
    dx_dk1 (n,2), dx_dk2 (n,2))`` from the implicit function theorem.
    """
    r2 = np.sum(x * x, axis=1)
    fac = 1.0 + k1 * r2 + k2 * r2 * r2
    g = 2.0 * (k1 + 2.0 * k2 * r2)
    Jd = fac[:, None, None] * np.eye(2) + g[:, None, None] * (x[:, :, None] * x[:, None, :])
    Jinv = np.linalg.inv(Jd)
    dk1 = -np.einsum("nij,nj->ni", Jinv, r2[:, None] * x)
    dk2 = -np.einsum("nij,nj->ni", Jinv, (r2 * r2)[:, None] * x)
    return Jinv, dk1, dk2


# ---------------------------------------------------------------------------
# projection


def skew(v) -> np.ndarray:
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


@dataclass
class ProjectionJacobians:
    """Per-point derivatives of the pixel (n, 2, .) w.r.t. each parameter group."""

    rotation: np.ndarray  # left axis-angle increment, (n,2,3)
    center: np.ndarray  # (n,2,3)
    focal: np.ndarray  # (n,2)
    k1: np.ndarray  # (n,2)
    k2: np.ndarray  # (n,2)
    point: np.ndarray  # (n,2,3)


def project_batch(R, c, f, k1, k2, pp, X, with_jacobians: bool = False):
    """Vectorized projection of n points, each with its own camera parameters.

    All per-camera arguments broadcast against ``X`` of shape (n, 3):
    ``R`` (n,3,3) or (3,3), ``c`` (n,3) or (3,), ``f``/``k1``/``k2`` scalars or
    (n,), ``pp`` (n,2) or (2,). Returns ``(pixels, depth[, jacobians])``;
    depth validity is left to the caller.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    R = np.broadcast_to(R, (n, 3, 3))
    d = X - c
    pc = np.einsum("nij,nj->ni", R, d)
    z = pc[:, 2]
    f = np.broadcast_to(np.asarray(f, dtype=float), (n,))
    k1 = np.broadcast_to(np.asarray(k1, dtype=float), (n,))
    k2 = np.broadcast_to(np.asarray(k2, dtype=float), (n,))
    # points at zero depth give inf/nan pixels; callers check z
    with np.errstate(divide="ignore", invalid="ignore"):
        x = pc[:, 0] / z
        y = pc[:, 1] / z
        r2 = x * x + y * y
        fac = 1.0 + k1 * r2 + k2 * r2 * r2
        uv = np.empty((n, 2))
        uv[:, 0] = f * fac * x
        uv[:, 1] = f * fac * y
        uv += pp
    if not with_jacobians:
        return uv, z

    dn = np.zeros((n, 2, 3))
    dn[:, 0, 0] = 1.0 / z
    dn[:, 0, 2] = -x / z
    dn[:, 1, 1] = 1.0 / z
    dn[:, 1, 2] = -y / z
    xy = np.stack([x, y], axis=1)
    g = 2.0 * (k1 + 2.0 * k2 * r2)
    Jd = fac[:, None, None] * np.eye(2) + g[:, None, None] * (xy[:, :, None] * xy[:, None, :])
    duv_dpc = f[:, None, None] * np.einsum("nij,njk->nik", Jd, dn)
    J_point = np.einsum("nij,njk->nik", duv_dpc, R)
    J_rot = -np.einsum("nij,njk->nik", duv_dpc, skew(pc))
    jac = ProjectionJacobians(
        rotation=J_rot,
        center=-J_point,
        focal=fac[:, None] * xy,
        k1=(f * r2)[:, None] * xy,
        k2=(f * r2 * r2)[:, None] * xy,
        point=J_point,
    )
    return uv, z, jac


def project(camera: Camera, point) -> np.ndarray:
    """Project world point(s); raises NonPositiveDepth for points behind the camera.

    A single 3-vector gives a 2-vector, an (n, 3) array gives (n, 2).
    """
    X = np.asarray(point, dtype=float)
    k = camera.intrinsics
    uv, z = project_batch(camera.pose.R, camera.pose.c, k.focal_px, k.k1, k.k2, k.principal_point, X)
    if np.any(~(z > 0)):
        raise NonPositiveDepth("point has non-positive depth in camera frame")
    return uv[0] if X.ndim == 1 else uv


def normalized_coordinates(intrinsics: Intrinsics, pixels) -> np.ndarray:
    """Pixels to undistorted normalized image coordinates."""
    p = np.asarray(pixels, dtype=float)
    xd = (p - intrinsics.principal_point) / intrinsics.focal_px
    return undistort_normalized(intrinsics, xd)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    in_bounds: bool = True

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def ray_directions(camera: Camera, pixels) -> np.ndarray:
    """Unit world-space directions of the viewing rays of (n, 2) pixels."""
    xy = np.atleast_2d(normalized_coordinates(camera.intrinsics, np.atleast_2d(pixels)))
    m = np.hstack([xy, np.ones((xy.shape[0], 1))])
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return m @ camera.pose.R


def pixel_ray(camera: Camera, pixel) -> Ray:
    """Viewing ray through ``pixel``; out-of-image pixels are allowed but flagged."""
    pixel = np.asarray(pixel, dtype=float)
    d = ray_directions(camera, pixel)[0]
    return Ray(camera.pose.c, d, bool(camera.intrinsics.in_bounds(pixel)[0]))
