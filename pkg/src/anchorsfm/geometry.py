"""Closed-form multi-view geometry: fundamental matrix, homography,
similarity alignment, epipolar lines and triangulation."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import Camera, Pose, normalized_coordinates, project_batch
from .errors import BehindCamera, DegenerateConfiguration, InsufficientParallax, ZeroLine
from .lm import LMOptions, ResidualProblem, lm_minimize


def to_homogeneous(p) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=float))
    return np.hstack([p, np.ones((p.shape[0], 1))])


def hartley_normalization(points) -> np.ndarray:
    """Similarity T moving the centroid to 0 and the mean distance to sqrt(2)."""
    p = np.asarray(points, dtype=float)
    mean = p.mean(axis=0)
    dist = np.sqrt(np.sum((p - mean) ** 2, axis=1)).mean()
    s = math.sqrt(2) / dist if dist > 0 else 1.0
    return np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])


def _apply(T, p) -> np.ndarray:
    q = to_homogeneous(p) @ T.T
    return q[:, :2] / q[:, 2:3]


def _count_distinct(p, q, tol=1e-9) -> int:
    key = np.round(np.hstack([p, q]) / tol).astype(np.int64)
    return len(np.unique(key, axis=0))


# ---------------------------------------------------------------------------
# fundamental matrix


def estimate_fundamental(pixels_a, pixels_b, normalize: bool = True) -> np.ndarray:
    """Eight-point estimate of F with ``x_b^T F x_a = 0``, rank 2 enforced."""
    pa = np.asarray(pixels_a, dtype=float)
    pb = np.asarray(pixels_b, dtype=float)
    if len(pa) < 8 or len(pa) != len(pb):
        raise DegenerateConfiguration("need at least 8 paired matches")
    if _count_distinct(pa, pb) < 8:
        raise DegenerateConfiguration("fewer than 8 distinct matches")
    Ta = hartley_normalization(pa) if normalize else np.eye(3)
    Tb = hartley_normalization(pb) if normalize else np.eye(3)
    a = _apply(Ta, pa)
    b = _apply(Tb, pb)
    A = np.column_stack([
        b[:, 0] * a[:, 0], b[:, 0] * a[:, 1], b[:, 0],
        b[:, 1] * a[:, 0], b[:, 1] * a[:, 1], b[:, 1],
        a[:, 0], a[:, 1], np.ones(len(a)),
    ])
    _, s, Vt = np.linalg.svd(A)
    # a planar scene leaves a 3-dimensional null space; anything smaller is degenerate
    if len(s) < 6 or s[5] <= 1e-10 * s[0]:
        raise DegenerateConfiguration("design matrix rank below 6")
    F = Vt[-1].reshape(3, 3)
    U, d, Vt2 = np.linalg.svd(F)
    F = U @ np.diag([d[0], d[1], 0.0]) @ Vt2
    F = Tb.T @ F @ Ta
    return F / np.linalg.norm(F)


def sampson_distance(F, pixels_a, pixels_b) -> np.ndarray:
    """First-order geometric distance (pixels) of each match to F."""
    xa = to_homogeneous(pixels_a)
    xb = to_homogeneous(pixels_b)
    Fxa = xa @ F.T
    Ftxb = xb @ F
    num = np.sum(xb * Fxa, axis=1)
    den = Fxa[:, 0] ** 2 + Fxa[:, 1] ** 2 + Ftxb[:, 0] ** 2 + Ftxb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(num) / np.sqrt(den)
    return np.where(den > 0, d, np.inf)


@dataclass(frozen=True)
class EpipolarLine:
    """Line ``a u + b v + c = 0`` with ``a^2 + b^2 = 1``."""

    coefficients: tuple

    @classmethod
    def from_vector(cls, l) -> "EpipolarLine":
        l = np.asarray(l, dtype=float)
        n = math.hypot(l[0], l[1])
        if n == 0 or not math.isfinite(n):
            raise ZeroLine("line has zero normal")
        return cls(tuple(float(v) for v in l / n))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.coefficients)

    def signed_distance(self, pixels) -> np.ndarray:
        a, b, c = self.coefficients
        p = np.asarray(pixels, dtype=float)
        return a * p[..., 0] + b * p[..., 1] + c


def epipolar_line(F, pixel_a) -> EpipolarLine:
    """Line in image b on which the match of ``pixel_a`` must lie."""
    return EpipolarLine.from_vector(F @ np.array([pixel_a[0], pixel_a[1], 1.0]))


def epipolar_residual(F, pixel_a, pixel_b) -> float:
    return float(abs(epipolar_line(F, pixel_a).signed_distance(np.asarray(pixel_b, dtype=float))))


# ---------------------------------------------------------------------------
# homography


def estimate_homography(pixels_a, pixels_b, normalize: bool = True) -> np.ndarray:
    """Normalized DLT for H with ``x_b ~ H x_a``."""
    pa = np.asarray(pixels_a, dtype=float)
    pb = np.asarray(pixels_b, dtype=float)
    if len(pa) < 4 or len(pa) != len(pb):
        raise DegenerateConfiguration("need at least 4 paired matches")
    Ta = hartley_normalization(pa) if normalize else np.eye(3)
    Tb = hartley_normalization(pb) if normalize else np.eye(3)
    a = _apply(Ta, pa)
    b = _apply(Tb, pb)
    n = len(a)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = a
    A[0::2, 2] = 1
    A[0::2, 6:8] = -b[:, 0:1] * a
    A[0::2, 8] = -b[:, 0]
    A[1::2, 3:5] = a
    A[1::2, 5] = 1
    A[1::2, 6:8] = -b[:, 1:2] * a
    A[1::2, 8] = -b[:, 1]
    _, s, Vt = np.linalg.svd(A)
    if s[7] <= 1e-10 * s[0]:
        raise DegenerateConfiguration("homography design matrix is rank deficient")
    H = _inverse_normalization(Tb) @ Vt[-1].reshape(3, 3) @ Ta
    if abs(H[2, 2]) > 1e-12 * np.abs(H).max():
        H = H / H[2, 2]
    else:
        H = H / np.linalg.norm(H)
    return H


def _inverse_normalization(T) -> np.ndarray:
    s = T[0, 0]
    return np.array([[1 / s, 0, -T[0, 2] / s], [0, 1 / s, -T[1, 2] / s], [0, 0, 1.0]])


def apply_homography(H, pixels) -> np.ndarray:
    q = to_homogeneous(pixels) @ np.asarray(H).T
    with np.errstate(divide="ignore", invalid="ignore"):
        return q[:, :2] / q[:, 2:3]


def symmetric_transfer_error(H, pixels_a, pixels_b) -> np.ndarray:
    """Root of the summed forward and backward squared transfer distances."""
    pa = np.atleast_2d(pixels_a)
    pb = np.atleast_2d(pixels_b)
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(len(pa), np.inf)
    fwd = np.sum((apply_homography(H, pa) - pb) ** 2, axis=1)
    bwd = np.sum((apply_homography(Hinv, pb) - pa) ** 2, axis=1)
    err = np.sqrt(fwd + bwd)
    return np.where(np.isfinite(err), err, np.inf)


# ---------------------------------------------------------------------------
# similarity alignment


@dataclass(frozen=True)
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    mse: float = 0.0

    def apply(self, X) -> np.ndarray:
        return self.scale * np.asarray(X) @ self.rotation.T + self.translation

    def apply_camera(self, camera: Camera) -> Camera:
        """Move a camera with the scene so projections are unchanged."""
        pose = camera.pose
        R = pose.R @ self.rotation.T
        c = self.apply(pose.c[None])[0]
        return camera.with_pose(Pose.from_matrix(R, c))


def similarity_align(source, target) -> Similarity:
    """Least-squares ``target ~ s R source + t`` (Umeyama closed form)."""
    x = np.asarray(source, dtype=float)
    y = np.asarray(target, dtype=float)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3 or len(x) < 3:
        raise DegenerateConfiguration("need matching (n>=3, 3) point sets")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    dx, dy = x - mx, y - my
    var_x = np.mean(np.sum(dx * dx, axis=1))
    sv = np.linalg.svd(dx, compute_uv=False)
    if var_x <= 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateConfiguration("source points are coincident or collinear")
    cov = dy.T @ dx / len(x)
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    s = float(np.sum(d * np.diag(S)) / var_x)
    t = my - s * R @ mx
    resid = y - (s * x @ R.T + t)
    return Similarity(s, R, t, float(np.mean(np.sum(resid * resid, axis=1))))


# ---------------------------------------------------------------------------
# triangulation


def max_ray_angle_deg(directions) -> float:
    d = np.asarray(directions)
    best = 0.0
    for i, j in itertools.combinations(range(len(d)), 2):
        c = float(np.clip(d[i] @ d[j], -1.0, 1.0))
        best = max(best, math.degrees(math.acos(c)))
    return best


def _dlt_point(cameras: Sequence[Camera], normalized: np.ndarray) -> np.ndarray:
    centers = np.array([c.pose.c for c in cameras])
    origin = centers.mean(axis=0)
    scale = max(np.linalg.norm(centers - origin, axis=1).max(), 1e-12)
    rows = []
    for cam, (x, y) in zip(cameras, normalized):
        R = cam.pose.R
        # camera matrix acting on the shifted, scaled world coordinates
        P = np.hstack([R * scale, (-R @ (cam.pose.c - origin))[:, None]])
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.array(rows))
    h = Vt[-1]
    if abs(h[3]) < 1e-15:
        raise InsufficientParallax("triangulated point at infinity")
    return origin + scale * h[:3] / h[3]


def point_problem(cameras: Sequence[Camera], pixels: np.ndarray) -> ResidualProblem:
    """Reprojection residuals of one 3D point against fixed cameras."""
    R = np.array([c.pose.R for c in cameras])
    cen = np.array([c.pose.c for c in cameras])
    f = np.array([c.intrinsics.focal_px for c in cameras])
    k1 = np.array([c.intrinsics.k1 for c in cameras])
    k2 = np.array([c.intrinsics.k2 for c in cameras])
    pp = np.array([c.intrinsics.principal_point for c in cameras])
    obs = np.asarray(pixels, dtype=float)

    def evaluate(X):
        uv, z = project_batch(R, cen, f, k1, k2, pp, np.broadcast_to(X, (len(obs), 3)))
        if np.any(~(z > 0)):
            raise BehindCamera("point behind an observing camera")
        return (uv - obs).ravel()

    def jacobian(X):
        _, _, jac = project_batch(R, cen, f, k1, k2, pp, np.broadcast_to(X, (len(obs), 3)), True)
        return jac.point.reshape(-1, 3)

    return ResidualProblem(evaluate, 3, 2 * len(obs), jacobian)


def triangulate(observations, min_angle_deg: float = 2.0, options: LMOptions | None = None) -> np.ndarray:
    """Intersect the viewing rays of ``[(camera, pixel), ...]``.

    Linear (DLT) estimate on undistorted rays, then one Levenberg-Marquardt
    refinement of the reprojection error.
    """
    if len(observations) < 2:
        raise InsufficientParallax("need at least two observations")
    cameras = [c for c, _ in observations]
    pixels = np.array([p for _, p in observations], dtype=float)
    normalized = np.array([normalized_coordinates(c.intrinsics, p) for c, p in observations])
    m = np.hstack([normalized, np.ones((len(normalized), 1))])
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    dirs = np.array([mi @ c.pose.R for mi, c in zip(m, cameras)])
    if max_ray_angle_deg(dirs) < min_angle_deg:
        raise InsufficientParallax(f"rays less than {min_angle_deg} degrees apart")
    X = _dlt_point(cameras, normalized)
    for cam in cameras:
        if cam.pose.to_camera(X)[0, 2] <= 0:
            raise BehindCamera("triangulated point behind an observing camera")
    problem = point_problem(cameras, pixels)
    X, _ = lm_minimize(problem, X, options or LMOptions(max_iterations=50))
    return X
