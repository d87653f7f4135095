"""Camera pose from 2D-3D correspondences.

``solve_pnp`` minimizes the squared reprojection error over the six
extrinsic parameters. ``solve_pnp_constrained`` adds point-to-epipolar-line
distances and uses robust (pseudo-Huber) terms for both, so a few bad pixel
correspondences are outvoted by the line constraints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import Intrinsics, Pose, normalized_coordinates, project_batch, rotate_quat
from .errors import (
    DegenerateConfiguration,
    DivergedBehindCamera,
    InvalidInitialPoint,
    MissingEpipolarLine,
    NonPositiveDepth,
    TooFewCorrespondences,
)
from .geometry import EpipolarLine
from .lm import LMOptions, ResidualProblem, lm_minimize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Correspondence2D3D:
    """A pixel and the 3D point it sees, optionally with an epipolar line.

    ``pixel`` may be None for a line-only constraint: a mesh point whose
    location in this image is unknown but must fall on ``epipolar_line``.
    """

    pixel: Optional[tuple]
    point: tuple
    epipolar_line: Optional[EpipolarLine] = None

    def __post_init__(self):
        if self.pixel is not None:
            object.__setattr__(self, "pixel", tuple(float(v) for v in self.pixel))
            if not np.all(np.isfinite(self.pixel)):
                raise ValueError("pixel must be finite")
        object.__setattr__(self, "point", tuple(float(v) for v in self.point))
        if not np.all(np.isfinite(self.point)):
            raise ValueError("point must be finite")


# ---------------------------------------------------------------------------
# pose parameter vector: [qw, qx, qy, qz, cx, cy, cz], tangent [rotvec(3), dc(3)]


def pose_to_vector(pose: Pose) -> np.ndarray:
    return np.concatenate([pose.quaternion, pose.center])


def vector_to_pose(x) -> Pose:
    return Pose(tuple(x[:4]), tuple(x[4:7]))


def pose_plus(x, delta) -> np.ndarray:
    return np.concatenate([rotate_quat(x[:4], delta[:3]), x[4:7] + delta[3:6]])


def _project_pose(x, intr: Intrinsics, points, with_jacobians=False):
    R = Pose(tuple(x[:4]), tuple(x[4:7])).R
    out = project_batch(R, x[4:7], intr.focal_px, intr.k1, intr.k2, intr.principal_point, points, with_jacobians)
    if np.any(~(out[1] > 0)):
        raise NonPositiveDepth("correspondence behind the camera")
    return out


def pnp_problem(correspondences: Sequence[Correspondence2D3D], intrinsics: Intrinsics) -> ResidualProblem:
    pixels = np.array([c.pixel for c in correspondences], dtype=float)
    points = np.array([c.point for c in correspondences], dtype=float)

    def evaluate(x):
        uv, _ = _project_pose(x, intrinsics, points)
        return (uv - pixels).ravel()

    def jacobian(x):
        _, _, jac = _project_pose(x, intrinsics, points, True)
        return np.concatenate([jac.rotation, jac.center], axis=2).reshape(-1, 6)

    return ResidualProblem(evaluate, 6, 2 * len(points), jacobian, pose_plus)


def _robust_weight(err: np.ndarray, delta: float):
    """Scale ``g`` and ``dg/dq`` (q = squared norm) of a pseudo-Huber residual.

    ``g(q) * e`` has squared norm ``delta^2 (sqrt(1 + q/delta^2) - 1)`` and,
    unlike the bare norm, stays differentiable at ``e = 0``.
    """
    q = np.sum(err * err, axis=-1) if err.ndim > 1 else err * err
    s = np.sqrt(1.0 + q / delta**2)
    g = (s + 1.0) ** -0.5
    dg = -0.5 * (s + 1.0) ** -1.5 / (2.0 * s * delta**2)
    return g, dg


def constrained_pnp_problem(correspondences: Sequence[Correspondence2D3D], intrinsics: Intrinsics,
                            reprojection_only: Sequence[Correspondence2D3D] = (),
                            reprojection_weight: float = 1.0, line_weight: float = 1.0,
                            delta: float = 1.0) -> ResidualProblem:
    """Robust reprojection + point-to-line residuals.

    Residual layout: every pixel-carrying correspondence (constrained ones
    first, then ``reprojection_only``) contributes a 2-vector, then every
    constrained correspondence contributes a scalar signed line distance.
    """
    with_pixel = [c for c in correspondences if c.pixel is not None] + list(reprojection_only)
    rp_pixels = np.array([c.pixel for c in with_pixel], dtype=float).reshape(-1, 2)
    rp_points = np.array([c.point for c in with_pixel], dtype=float).reshape(-1, 3)
    ln_points = np.array([c.point for c in correspondences], dtype=float).reshape(-1, 3)
    lines = np.array([c.epipolar_line.vector for c in correspondences]).reshape(-1, 3)
    all_points = np.vstack([rp_points, ln_points])
    n_rp, n_ln = len(rp_points), len(ln_points)
    w_rp = np.sqrt(reprojection_weight)
    w_ln = np.sqrt(line_weight)

    def parts(x, with_jacobians):
        out = _project_pose(x, intrinsics, all_points, with_jacobians)
        uv = out[0]
        e = uv[:n_rp] - rp_pixels
        d = np.sum(lines[:, :2] * uv[n_rp:], axis=1) + lines[:, 2]
        return out, e, d

    def evaluate(x):
        _, e, d = parts(x, False)
        g_e, _ = _robust_weight(e, delta)
        g_d, _ = _robust_weight(d, delta)
        return np.concatenate([(w_rp * g_e[:, None] * e).ravel(), w_ln * g_d * d])

    def jacobian(x):
        (_, _, jac), e, d = parts(x, True)
        J = np.concatenate([jac.rotation, jac.center], axis=2)  # (n,2,6)
        J_rp, J_ln = J[:n_rp], J[n_rp:]
        g_e, dg_e = _robust_weight(e, delta)
        de = J_rp
        # d(g e)/dθ = g de/dθ + e (dg/dq) 2 e^T de/dθ
        eTde = np.einsum("ni,nij->nj", e, de)
        Jr = g_e[:, None, None] * de + 2.0 * dg_e[:, None, None] * e[:, :, None] * eTde[:, None, :]
        dd = np.einsum("ni,nij->nj", lines[:, :2], J_ln)
        g_d, dg_d = _robust_weight(d, delta)
        Jl = (g_d + 2.0 * dg_d * d * d)[:, None] * dd
        return np.vstack([w_rp * Jr.reshape(-1, 6), w_ln * Jl])

    return ResidualProblem(evaluate, 6, 2 * n_rp + n_ln, jacobian, pose_plus)


def _front_mask(pose: Pose, points: np.ndarray) -> np.ndarray:
    return pose.to_camera(points)[:, 2] > 0


def solve_pnp(correspondences: Sequence[Correspondence2D3D], intrinsics: Intrinsics, initial_pose: Pose,
              options: Optional[LMOptions] = None) -> Pose:
    """Least-squares pose with intrinsics held fixed."""
    corr = [c for c in correspondences if c.pixel is not None]
    if len(corr) < 4:
        raise TooFewCorrespondences(f"{len(corr)} correspondences, need 4")
    points = np.array([c.point for c in corr])
    front = _front_mask(initial_pose, points)
    if front.sum() < 4 or front.sum() * 2 <= len(corr):
        raise DivergedBehindCamera("initial pose sees fewer than half of the points in front")
    x = pose_to_vector(initial_pose)
    if not front.all():
        # settle on the visible subset first, then the full set if it has come around
        subset = [c for c, f in zip(corr, front) if f]
        x, _ = lm_minimize(pnp_problem(subset, intrinsics), x, options)
        if not _front_mask(vector_to_pose(x), points).all():
            raise DivergedBehindCamera("points remain behind the camera after refinement")
    try:
        x, _ = lm_minimize(pnp_problem(corr, intrinsics), x, options)
    except InvalidInitialPoint as exc:
        raise DivergedBehindCamera(str(exc)) from exc
    return vector_to_pose(x)


def solve_pnp_constrained(correspondences: Sequence[Correspondence2D3D], intrinsics: Intrinsics,
                          initial_pose: Pose, options: Optional[LMOptions] = None, *,
                          reprojection_only: Sequence[Correspondence2D3D] = (),
                          reprojection_weight: float = 1.0, line_weight: float = 1.0,
                          delta: float = 1.0) -> Pose:
    """Pose minimizing robust reprojection error plus distance to epipolar lines.

    Every entry of ``correspondences`` must carry an epipolar line; its pixel
    is optional. ``reprojection_only`` adds plain 2D-3D terms without lines.
    """
    if any(c.epipolar_line is None for c in correspondences):
        raise MissingEpipolarLine("every constrained correspondence needs an epipolar line")
    total = len(correspondences) + len(reprojection_only)
    if total < 4:
        raise TooFewCorrespondences(f"{total} correspondences, need 4")
    everything = list(correspondences) + list(reprojection_only)
    front = _front_mask(initial_pose, np.array([c.point for c in everything]))
    if front.sum() * 2 <= len(everything):
        raise DivergedBehindCamera("initial pose sees fewer than half of the points in front")
    keep_c = [c for c, f in zip(correspondences, front[: len(correspondences)]) if f]
    keep_r = [c for c, f in zip(reprojection_only, front[len(correspondences):]) if f]
    if len(keep_c) < len(correspondences) or len(keep_r) < len(reprojection_only):
        log.warning("constrained PnP: ignoring %d points behind the initial pose",
                    total - len(keep_c) - len(keep_r))
    problem = constrained_pnp_problem(keep_c, intrinsics, keep_r, reprojection_weight, line_weight, delta)
    try:
        x, _ = lm_minimize(problem, pose_to_vector(initial_pose), options)
    except InvalidInitialPoint as exc:
        raise DivergedBehindCamera(str(exc)) from exc
    return vector_to_pose(x)


def pose_from_dlt(correspondences: Sequence[Correspondence2D3D], intrinsics: Intrinsics) -> Pose:
    """Linear pose estimate from >= 6 non-coplanar correspondences."""
    corr = [c for c in correspondences if c.pixel is not None]
    if len(corr) < 6:
        raise TooFewCorrespondences("DLT needs at least 6 correspondences")
    X = np.array([c.point for c in corr], dtype=float)
    xy = normalized_coordinates(intrinsics, np.array([c.pixel for c in corr], dtype=float))
    mean = X.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum((X - mean) ** 2, axis=1)))
    sv = np.linalg.svd(X - mean, compute_uv=False)
    if scale == 0 or sv[2] < 1e-6 * sv[0]:
        raise DegenerateConfiguration("DLT points are coplanar")
    Xn = np.hstack([(X - mean) / scale, np.ones((len(X), 1))])
    A = np.zeros((2 * len(X), 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -xy[:, 0:1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -xy[:, 1:2] * Xn
    P = np.linalg.svd(A)[2][-1].reshape(3, 4)
    if np.sum(Xn @ P[2] > 0) * 2 < len(X):
        P = -P
    M = P[:, :3]
    U, s, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        raise DegenerateConfiguration("DLT produced a reflection")
    lam = s.mean()
    t = P[:, 3] / lam
    # undo the normalization: x_cam = R (X - mean)/scale + t  ->  center = mean - scale R^T t
    center = mean - scale * R.T @ t
    return Pose.from_matrix(R, center)
