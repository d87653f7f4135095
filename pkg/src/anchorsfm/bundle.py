"""Bundle adjustment with anchor cameras.

Three formulations share one residual (pixel reprojection error):

* ``classic``: all cameras and points are free except the first anchor's
  pose, which pins the gauge. Without anchors, camera 0's pose is fixed and
  camera 1 may only move on the sphere around camera 0 (fixes scale).
* ``hard``: points seen by an anchor live on that anchor's viewing ray,
  ``X = center + t * ray(u)``, and are optimized through ``t`` alone. Anchor
  poses are constants; anchor intrinsics stay free (the rays follow them).
* ``soft``: anchor poses are constants and anchor observations get a large
  weight instead of a hard ray constraint.

Intrinsics (focal, k1, k2) are free per image in every mode.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse
from scipy.spatial.transform import Rotation

from .camera import Camera, Intrinsics, Pose, _undistort, normalize_quat, project_batch, undistort_jacobian
from .errors import DistortionNotInvertible, NegativeRayParameter, NonPositiveDepth, NumericalFailure, UnderConstrained
from .lm import LMOptions, ResidualProblem, SolveReport, lm_minimize
from .tracks import Track

log = logging.getLogger(__name__)

MIN_CAMERA_OBSERVATIONS = 6
MAX_DISTORTION = 0.5  # validity range of k1, k2


class BAMode(str, enum.Enum):
    CLASSIC = "classic"
    HARD = "hard"
    SOFT = "soft"


@dataclass
class BundleProblem:
    cameras: dict  # image id -> Camera
    tracks: Sequence[Track]
    anchor_ids: Sequence[str] = ()
    mode: BAMode = BAMode.HARD
    weights: Optional[dict] = None  # image id -> w_i, soft mode only
    anchor_weight: float = 100.0
    fixed_ids: Sequence[str] = ()  # cameras held completely constant
    pin_scale: bool = True  # with a single fixed pose, hold one camera distance
    refine_intrinsics: bool = True  # False holds f, k1, k2 of every camera constant

    def __post_init__(self):
        self.mode = BAMode(self.mode)
        if self.anchor_weight <= 0:
            raise ValueError("anchor_weight must be positive")
        if self.weights and any(w <= 0 for w in self.weights.values()):
            raise ValueError("weights must be positive")


@dataclass
class BundleResult:
    cameras: dict
    points: list  # aligned with problem.tracks; None where the track was not adjusted
    report: SolveReport
    ray_parameters: dict = field(default_factory=dict)  # track index -> (anchor id, t)
    dropped_ray_constraints: list = field(default_factory=list)  # (track index, anchor id)


# camera block kinds
FIXED, INTRINSICS, FULL, SPHERE = "fixed", "intrinsics", "full", "sphere"
_CAM_AMBIENT = {FIXED: 0, INTRINSICS: 3, FULL: 10, SPHERE: 10}
_POSE_TANGENT = {FIXED: 0, INTRINSICS: 0, FULL: 6, SPHERE: 5}


def _tangent_basis(n: np.ndarray) -> np.ndarray:
    """Two orthonormal vectors perpendicular to unit vector ``n`` (as columns)."""
    a = np.eye(3)[np.argmin(np.abs(n))]
    b1 = np.cross(n, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(n, b1)
    return np.stack([b1, b2], axis=1)


class BundleModel:
    """Parameter layout, residuals and Jacobian of one bundle problem."""

    def __init__(self, problem: BundleProblem):
        self.problem = problem
        mode = problem.mode
        self.ids = list(problem.cameras)
        index = {cid: i for i, cid in enumerate(self.ids)}
        anchors = [a for a in problem.anchor_ids if a in index]
        fixed = set(problem.fixed_ids)
        if mode in (BAMode.HARD, BAMode.SOFT) and not anchors:
            raise UnderConstrained(f"{mode.value} bundle adjustment needs at least one anchor camera")

        kinds = []
        for cid in self.ids:
            if cid in fixed:
                kinds.append(FIXED)
            elif cid in anchors and (mode != BAMode.CLASSIC or cid == anchors[0]):
                kinds.append(INTRINSICS)
            else:
                kinds.append(FULL)
        self.sphere_ref = None
        self.pinned_scale = False
        pinned = [i for i, k in enumerate(kinds) if k in (FIXED, INTRINSICS)]
        if mode == BAMode.CLASSIC and not pinned:
            if len(self.ids) < 2:
                raise UnderConstrained("classic bundle adjustment without anchors needs two cameras")
            kinds[0] = INTRINSICS
            pinned = [0]
            self.pinned_scale = True
        free = [i for i, k in enumerate(kinds) if k == FULL]
        if len(pinned) == 1 and free and (problem.pin_scale or self.pinned_scale):
            # one fixed pose leaves scale about its center free: keep the
            # free camera farthest from it at its current distance
            c0 = problem.cameras[self.ids[pinned[0]]].pose.c
            dist = [np.linalg.norm(problem.cameras[self.ids[i]].pose.c - c0) for i in free]
            far = int(np.argmax(dist))
            radius = dist[far]
            if radius <= 0:
                raise UnderConstrained("camera centers coincide; scale cannot be fixed")
            kinds[free[far]] = SPHERE
            self.sphere_ref = (c0, radius)
        self.n_intr = 3 if problem.refine_intrinsics else 0
        if not self.n_intr:
            kinds = [FIXED if k == INTRINSICS else k for k in kinds]
        self.kinds = kinds

        # observations: only tracks with >= 2 views among the problem cameras
        obs_cam, obs_track, obs_px = [], [], []
        self.track_ids = []
        for ti, tr in enumerate(problem.tracks):
            views = [(cid, px) for cid, px in tr.observations.items() if cid in index]
            if len(views) < 2 or tr.point is None:
                continue
            self.track_ids.append(ti)
            for cid, px in views:
                obs_cam.append(index[cid])
                obs_track.append(len(self.track_ids) - 1)
                obs_px.append(px)
        self.obs_cam = np.array(obs_cam, dtype=int)
        self.obs_track = np.array(obs_track, dtype=int)
        self.obs_px = np.array(obs_px, dtype=float).reshape(-1, 2)
        counts = np.bincount(self.obs_cam, minlength=len(self.ids))
        for i, k in enumerate(kinds):
            if k in (FULL, SPHERE) and counts[i] < MIN_CAMERA_OBSERVATIONS:
                raise UnderConstrained(f"camera {self.ids[i]} has {counts[i]} observations, "
                                       f"needs {MIN_CAMERA_OBSERVATIONS}")

        if mode == BAMode.SOFT:
            w = np.array([problem.anchor_weight if cid in anchors else 1.0 for cid in self.ids])
            for cid, wi in (problem.weights or {}).items():
                if cid in index:
                    w[index[cid]] = wi
        else:
            w = np.ones(len(self.ids))
        self.obs_sqrt_w = np.sqrt(w[self.obs_cam])

        # fixed camera values
        cams = [problem.cameras[c] for c in self.ids]
        self.base_q = np.array([c.pose.quaternion for c in cams]).reshape(-1, 4)
        self.base_c = np.array([c.pose.center for c in cams]).reshape(-1, 3)
        self.base_intr = np.array([[c.intrinsics.focal_px, c.intrinsics.k1, c.intrinsics.k2] for c in cams])
        self.pp = np.array([c.intrinsics.principal_point for c in cams]).reshape(-1, 2)

        # point blocks; in hard mode anchor-seen tracks become ray parameters
        n_pts = len(self.track_ids)
        self.ray_anchor = np.full(n_pts, -1, dtype=int)
        self.ray_pixel = np.zeros((n_pts, 2))
        self.init_t = np.zeros(n_pts)
        self.dropped = []
        anchor_idx = [index[a] for a in anchors]
        for p, ti in enumerate(self.track_ids):
            tr = problem.tracks[ti]
            if mode != BAMode.HARD:
                continue
            for a in anchor_idx:
                cid = self.ids[a]
                if cid in tr.observations:
                    px = np.asarray(tr.observations[cid], dtype=float)
                    d = self._ray_dirs(np.array([a]), px[None], self.base_intr[a:a + 1])[0]
                    t = float((np.asarray(tr.point) - self.base_c[a]) @ d)
                    if t <= 0:
                        log.warning("track %d lies behind anchor %s; anchor ray constraint dropped", ti, cid)
                        self.dropped.append((ti, cid))
                    else:
                        self.ray_anchor[p] = a
                        self.ray_pixel[p] = px
                        self.init_t[p] = t
                    break
        self.is_ray = self.ray_anchor >= 0

        # ambient / tangent offsets
        amb = tan = 0
        self.cam_amb = np.zeros(len(self.ids), dtype=int)
        self.cam_tan = np.zeros(len(self.ids), dtype=int)
        for i, k in enumerate(kinds):
            self.cam_amb[i], self.cam_tan[i] = amb, tan
            amb += _CAM_AMBIENT[k]
            tan += _POSE_TANGENT[k] + (self.n_intr if k != FIXED else 0)
        self.pt_amb = np.zeros(n_pts, dtype=int)
        self.pt_tan = np.zeros(n_pts, dtype=int)
        for p in range(n_pts):
            self.pt_amb[p], self.pt_tan[p] = amb, tan
            size = 1 if self.is_ray[p] else 3
            amb += size
            tan += size
        self.ambient_size, self.tangent_size = amb, tan

        # tangent column of each (camera, slot) where slots are rot3, center3, f, k1, k2; -1 when not free
        cols = np.full((len(self.ids), 9), -1, dtype=int)
        for i, k in enumerate(kinds):
            o = self.cam_tan[i]
            if k == FULL:
                cols[i, :6] = o + np.arange(6)
            elif k == SPHERE:
                cols[i, :3] = o + np.arange(3)
                cols[i, 3:5] = o + 3 + np.arange(2)
            if self.n_intr and k != FIXED:
                cols[i, 6:9] = o + _POSE_TANGENT[k] + np.arange(3)
        self.cam_cols = cols

    # -- parameter vector -------------------------------------------------

    def initial_vector(self) -> np.ndarray:
        x = np.zeros(self.ambient_size)
        for i, k in enumerate(self.kinds):
            o = self.cam_amb[i]
            if k == INTRINSICS:
                x[o:o + 3] = self.base_intr[i]
            elif k in (FULL, SPHERE):
                x[o:o + 4] = self.base_q[i]
                x[o + 4:o + 7] = self.base_c[i]
                x[o + 7:o + 10] = self.base_intr[i]
        for p, ti in enumerate(self.track_ids):
            o = self.pt_amb[p]
            if self.is_ray[p]:
                x[o] = self.init_t[p]
            else:
                x[o:o + 3] = self.problem.tracks[ti].point
        return x

    def plus(self, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
        out = x.copy()
        rot_idx = [i for i, k in enumerate(self.kinds) if k in (FULL, SPHERE)]
        if rot_idx:
            amb = self.cam_amb[rot_idx]
            tan = self.cam_tan[rot_idx]
            q = x[amb[:, None] + np.arange(4)]
            dr = delta[tan[:, None] + np.arange(3)]
            rot = Rotation.from_rotvec(dr) * Rotation.from_quat(q, scalar_first=True)
            qn = rot.as_quat(scalar_first=True)
            qn *= np.where(qn[:, :1] < 0, -1.0, 1.0)
            out[amb[:, None] + np.arange(4)] = qn
        for i, k in enumerate(self.kinds):
            a, t = self.cam_amb[i], self.cam_tan[i]
            if k == FULL:
                out[a + 4:a + 7] = x[a + 4:a + 7] + delta[t + 3:t + 6]
            elif k == SPHERE:
                c0, radius = self.sphere_ref
                n = (x[a + 4:a + 7] - c0) / radius
                v = n + _tangent_basis(n) @ delta[t + 3:t + 5]
                out[a + 4:a + 7] = c0 + radius * v / np.linalg.norm(v)
            if self.n_intr and k != FIXED:
                ia = a if k == INTRINSICS else a + 7
                it = t + _POSE_TANGENT[k]
                out[ia:ia + 3] = x[ia:ia + 3] + delta[it:it + 3]
        pts = self.pt_amb
        out[pts[self.is_ray]] = x[pts[self.is_ray]] + delta[self.pt_tan[self.is_ray]]
        free = ~self.is_ray
        out[pts[free][:, None] + np.arange(3)] = (x[pts[free][:, None] + np.arange(3)]
                                                   + delta[self.pt_tan[free][:, None] + np.arange(3)])
        return out

    def unpack_cameras(self, x: np.ndarray):
        q = self.base_q.copy()
        c = self.base_c.copy()
        intr = self.base_intr.copy()
        for i, k in enumerate(self.kinds):
            o = self.cam_amb[i]
            if k == INTRINSICS:
                intr[i] = x[o:o + 3]
            elif k in (FULL, SPHERE):
                q[i] = x[o:o + 4]
                c[i] = x[o + 4:o + 7]
                intr[i] = x[o + 7:o + 10]
        R = Rotation.from_quat(q, scalar_first=True).as_matrix() if len(q) else np.zeros((0, 3, 3))
        return q, R, c, intr

    def _ray_dirs(self, cam_idx, pixels, intr, R=None, with_jacobians=False):
        """Unit world ray directions of anchor pixels (and d dir / d(f, k1, k2))."""
        f, k1, k2 = intr[:, 0], intr[:, 1], intr[:, 2]
        pp = self.pp[cam_idx]
        xd = (pixels - pp) / f[:, None]
        xu = _undistort(k1[:, None], k2[:, None], xd)
        m = np.hstack([xu, np.ones((len(xu), 1))])
        norm = np.linalg.norm(m, axis=1)
        nvec = m / norm[:, None]
        if R is None:
            R = Rotation.from_quat(self.base_q[cam_idx], scalar_first=True).as_matrix()
        dirs = np.einsum("nji,nj->ni", R, nvec)  # R^T n
        if not with_jacobians:
            return dirs
        Jinv, dk1, dk2 = undistort_jacobian(k1, k2, xu)
        dxu_df = np.einsum("nij,nj->ni", Jinv, -xd / f[:, None])
        dxu = np.stack([dxu_df, dk1, dk2], axis=2)  # (n,2,3)
        dn_dm = (np.eye(3) - nvec[:, :, None] * nvec[:, None, :]) / norm[:, None, None]
        dn = np.einsum("nij,njk->nik", dn_dm[:, :, :2], dxu)  # (n,3,3)
        ddir = np.einsum("nji,njk->nik", R, dn)
        return dirs, ddir

    def points(self, x: np.ndarray, cams=None, with_jacobians=False):
        """World points of all adjusted tracks (n_pts, 3)."""
        _, R, c, intr = cams if cams is not None else self.unpack_cameras(x)
        n = len(self.track_ids)
        X = np.zeros((n, 3))
        free = ~self.is_ray
        if free.any():
            X[free] = x[self.pt_amb[free][:, None] + np.arange(3)]
        dX_dt = ddir_t = None
        if self.is_ray.any():
            a = self.ray_anchor[self.is_ray]
            t = x[self.pt_amb[self.is_ray]]
            if np.any(t <= 0):
                raise NegativeRayParameter("ray parameter driven non-positive")
            out = self._ray_dirs(a, self.ray_pixel[self.is_ray], intr[a], R[a], with_jacobians)
            dirs = out[0] if with_jacobians else out
            X[self.is_ray] = c[a] + t[:, None] * dirs
            if with_jacobians:
                dX_dt = dirs
                ddir_t = t[:, None, None] * out[1]
        return (X, dX_dt, ddir_t) if with_jacobians else X

    # -- residuals -----------------------------------------------------------

    def _project(self, x, with_jacobians):
        cams = self.unpack_cameras(x)
        _, R, c, intr = cams
        if self.n_intr and np.any(np.abs(intr[:, 1:]) > MAX_DISTORTION):
            # outside the invertible range; LM treats the trial step as infeasible
            raise DistortionNotInvertible(f"bundle distortion left |k| <= {MAX_DISTORTION}")
        pts = self.points(x, cams, with_jacobians)
        X = pts[0] if with_jacobians else pts
        ci = self.obs_cam
        out = project_batch(R[ci], c[ci], intr[ci, 0], intr[ci, 1], intr[ci, 2], self.pp[ci],
                            X[self.obs_track], with_jacobians)
        if np.any(~(out[1] > 0)):
            raise NonPositiveDepth("bundle point behind an observing camera")
        return cams, pts, out

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        _, _, (uv, _) = self._project(x, False)
        return ((uv - self.obs_px) * self.obs_sqrt_w[:, None]).ravel()

    def jacobian(self, x: np.ndarray):
        cams, (X, dX_dt, ddir_t), (uv, z, jac) = self._project(x, True)
        n_obs = len(self.obs_cam)
        sw = self.obs_sqrt_w
        rows_base = 2 * np.arange(n_obs)
        rows, cols, vals = [], [], []

        def add(col_per_obs, block):
            # block: (n_obs, 2) values landing in column col_per_obs (n_obs,)
            ok = col_per_obs >= 0
            for r in range(2):
                rows.append(rows_base[ok] + r)
                cols.append(col_per_obs[ok])
                vals.append(block[ok, r] * sw[ok])

        cam_cols = self.cam_cols[self.obs_cam]
        cam_blocks = [jac.rotation[:, :, 0], jac.rotation[:, :, 1], jac.rotation[:, :, 2]]
        kinds_obs = np.array([self.kinds[i] for i in self.obs_cam]) if n_obs else np.array([])
        J_center = jac.center
        if self.sphere_ref is not None:
            s = self.kinds.index(SPHERE)
            c0, radius = self.sphere_ref
            n = (cams[2][s] - c0) / radius
            B = radius * _tangent_basis(n)
            sph = kinds_obs == SPHERE
            J_center = J_center.copy()
            J_center[sph, :, :2] = J_center[sph] @ B
            J_center[sph, :, 2] = 0.0
        cam_blocks += [J_center[:, :, 0], J_center[:, :, 1], J_center[:, :, 2], jac.focal, jac.k1, jac.k2]
        for slot, block in enumerate(cam_blocks):
            add(cam_cols[:, slot], block)

        p = self.obs_track
        ray_obs = self.is_ray[p]
        free_obs = ~ray_obs
        for k in range(3):
            col = np.where(free_obs, self.pt_tan[p] + k, -1)
            add(col, jac.point[:, :, k])
        if ray_obs.any():
            ray_rank = np.cumsum(self.is_ray) - 1  # index into ray arrays
            rr = ray_rank[p[ray_obs]]
            Jp = jac.point[ray_obs]
            full_t = np.zeros((n_obs, 2))
            full_t[ray_obs] = np.einsum("nij,nj->ni", Jp, dX_dt[rr])
            add(np.where(ray_obs, self.pt_tan[p], -1), full_t)
            Jth = np.einsum("nij,njk->nik", Jp, ddir_t[rr])  # (m,2,3)
            anchor = self.ray_anchor[p[ray_obs]]
            for k in range(3):
                col = np.full(n_obs, -1)
                col[ray_obs] = self.cam_cols[anchor, 6 + k]
                blk = np.zeros((n_obs, 2))
                blk[ray_obs] = Jth[:, :, k]
                add(col, blk)

        if rows:
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.concatenate(vals)
        return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(2 * n_obs, self.tangent_size))

    def residual_problem(self) -> ResidualProblem:
        return ResidualProblem(self.evaluate, self.tangent_size, 2 * len(self.obs_cam), self.jacobian, self.plus)


def bundle_adjust(problem: BundleProblem, options: Optional[LMOptions] = None) -> BundleResult:
    model = BundleModel(problem)
    rp = model.residual_problem()
    x0 = model.initial_vector()
    if problem.mode == BAMode.CLASSIC and model.pinned_scale and rp.parameter_count:
        J = rp.jacobian(x0).toarray()
        eig = np.linalg.eigvalsh(J.T @ J)
        if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
            raise UnderConstrained("normal equations are rank deficient with the gauge fixed")
    try:
        x, report = lm_minimize(rp, x0, options)
    except NumericalFailure:
        raise

    q, _, c, intr = model.unpack_cameras(x)
    X = model.points(x)
    cameras = {}
    for i, cid in enumerate(model.ids):
        old = problem.cameras[cid]
        k = model.kinds[i]
        if k == FIXED:
            cameras[cid] = old
            continue
        f, k1, k2 = (float(v) for v in intr[i])
        new_intr = Intrinsics(f, k1, k2, old.intrinsics.width, old.intrinsics.height)
        if k == INTRINSICS:
            cameras[cid] = Camera(new_intr, old.pose)  # pose object untouched
        else:
            cameras[cid] = Camera(new_intr, Pose(tuple(normalize_quat(q[i])), tuple(c[i])))
    points = [None] * len(problem.tracks)
    ray_params = {}
    for p, ti in enumerate(model.track_ids):
        points[ti] = X[p]
        if model.is_ray[p]:
            ray_params[ti] = (model.ids[model.ray_anchor[p]], float(x[model.pt_amb[p]]))
    return BundleResult(cameras, points, report, ray_params, list(model.dropped))
