import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsfm.camera import Camera, Pose, project
from anchorsfm.errors import (
    DegenerateConfiguration,
    DivergedBehindCamera,
    MissingEpipolarLine,
    TooFewCorrespondences,
)
from anchorsfm.lm import check_jacobian, lm_minimize
from anchorsfm.pnp import (
    Correspondence2D3D,
    constrained_pnp_problem,
    pnp_problem,
    pose_from_dlt,
    pose_to_vector,
    solve_pnp,
    solve_pnp_constrained,
)

from helpers import (
    camera,
    exact_lines,
    perturb_pose,
    planted_corruption_case,
    pnp_setup,
    random_rotation,
    rotation_angle_deg,
)


def corr(px, pts, lines=None):
    lines = lines or [None] * len(pts)
    return [Correspondence2D3D(tuple(u), tuple(X), ln) for u, X, ln in zip(px, pts, lines)]


def pose_error(a: Pose, b: Pose):
    return np.radians(rotation_angle_deg(a.R, b.R)), float(np.linalg.norm(a.c - b.c))


def rms(cam, intr, pose, c):
    px = np.array([x.pixel for x in c])
    pts = np.array([x.point for x in c])
    return float(np.sqrt(np.mean(np.sum((project(Camera(intr, pose), pts) - px) ** 2, axis=1))))


class TestSolvePnP:
    def test_recovers_from_perturbation(self):
        cam, pts, px = pnp_setup(seed=0, k1=0.05)
        init = perturb_pose(cam.pose, np.random.default_rng(0), 5.0, 0.2)
        pose = solve_pnp(corr(px, pts), cam.intrinsics, init)
        rot, cen = pose_error(pose, cam.pose)
        assert rot < 1e-6 and cen < 1e-6
        assert rms(cam, cam.intrinsics, pose, corr(px, pts)) < 1e-6

    def test_truth_is_stationary(self):
        cam, pts, px = pnp_setup(seed=1)
        problem = pnp_problem(corr(px, pts), cam.intrinsics)
        _, report = lm_minimize(problem, pose_to_vector(cam.pose))
        assert report.step_costs == []
        pose = solve_pnp(corr(px, pts), cam.intrinsics, cam.pose)
        np.testing.assert_allclose(pose.quaternion, cam.pose.quaternion, atol=1e-15)
        np.testing.assert_allclose(pose.center, cam.pose.center, atol=1e-15)

    def test_too_few(self):
        cam, pts, px = pnp_setup(seed=2, n=3)
        with pytest.raises(TooFewCorrespondences):
            solve_pnp(corr(px, pts), cam.intrinsics, cam.pose)

    def test_facing_away_diverges(self):
        cam, pts, px = pnp_setup(seed=3)
        away = cam.pose.rotated((0.0, np.pi, 0.0))
        with pytest.raises(DivergedBehindCamera):
            solve_pnp(corr(px, pts), cam.intrinsics, away)

    @settings(max_examples=25)
    @given(st.integers(0, 2**32 - 1))
    def test_rigid_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        cam, pts, px = pnp_setup(seed=int(rng.integers(1000)))
        px = px + rng.normal(0, 0.5, px.shape)
        init = perturb_pose(cam.pose, rng, 3.0, 0.1)
        Q = random_rotation(rng)
        t = rng.normal(0, 2, 3)
        a = solve_pnp(corr(px, pts), cam.intrinsics, init)
        moved_init = Pose.from_matrix(init.R @ Q.T, Q @ init.c + t)
        b = solve_pnp(corr(px, pts @ Q.T + t), cam.intrinsics, moved_init)
        np.testing.assert_allclose(b.R, a.R @ Q.T, atol=1e-9)
        np.testing.assert_allclose(b.c, Q @ a.c + t, atol=1e-9)

    def test_jacobian(self):
        cam, pts, px = pnp_setup(seed=4, k1=-0.1)
        problem = pnp_problem(corr(px, pts), cam.intrinsics)
        x = pose_to_vector(perturb_pose(cam.pose, np.random.default_rng(4), 4.0, 0.3))
        assert check_jacobian(problem, x)[0]


class TestConstrainedPnP:
    def setup_lines(self, seed=5):
        cam, pts, px = pnp_setup(seed=seed)
        other = camera((-3.0, -7.0, 3.0), target=(0.0, 0.0, 0.3), f=560.0)
        return cam, pts, px, exact_lines(cam, other, pts)

    def test_exact_recovers_truth(self):
        cam, pts, px, lines = self.setup_lines()
        init = perturb_pose(cam.pose, np.random.default_rng(1), 5.0, 0.2)
        pose = solve_pnp_constrained(corr(px, pts, lines), cam.intrinsics, init)
        rot, cen = pose_error(pose, cam.pose)
        assert rot < 1e-6 and cen < 1e-6

    def test_lines_never_hurt_on_noiseless_data(self):
        cam, pts, px, lines = self.setup_lines(seed=6)
        init = perturb_pose(cam.pose, np.random.default_rng(2), 5.0, 0.2)
        plain = solve_pnp(corr(px, pts), cam.intrinsics, init)
        constrained = solve_pnp_constrained(corr(px, pts, lines), cam.intrinsics, init)
        c = corr(px, pts)
        assert rms(cam, cam.intrinsics, constrained, c) <= rms(cam, cam.intrinsics, plain, c) + 1e-6

    def test_planted_corruption_single_case(self):
        cam, c, init = planted_corruption_case(0)
        plain = solve_pnp(c, cam.intrinsics, init)
        constrained = solve_pnp_constrained(c, cam.intrinsics, init)
        assert rotation_angle_deg(constrained.R, cam.pose.R) <= rotation_angle_deg(plain.R, cam.pose.R)

    def test_missing_line(self):
        cam, pts, px, lines = self.setup_lines()
        lines[3] = None
        with pytest.raises(MissingEpipolarLine):
            solve_pnp_constrained(corr(px, pts, lines), cam.intrinsics, cam.pose)

    def test_line_only_and_reprojection_only_terms(self):
        cam, pts, px, lines = self.setup_lines(seed=7)
        line_only = [Correspondence2D3D(None, tuple(X), ln) for X, ln in zip(pts[:8], lines[:8])]
        extra = corr(px[8:], pts[8:])
        init = perturb_pose(cam.pose, np.random.default_rng(3), 3.0, 0.1)
        pose = solve_pnp_constrained(line_only, cam.intrinsics, init, reprojection_only=extra)
        rot, cen = pose_error(pose, cam.pose)
        assert rot < 1e-6 and cen < 1e-6

    def test_pseudo_huber_value(self):
        # one correspondence, pixel off by 3 px along u, line through the truth
        cam, pts, px, lines = self.setup_lines(seed=8)
        c = [Correspondence2D3D((px[0, 0] + 3.0, px[0, 1]), tuple(pts[0]), lines[0])]
        problem = constrained_pnp_problem(c, cam.intrinsics)
        r = problem.evaluate(pose_to_vector(cam.pose))
        # squared norm of the robust reprojection pair equals delta^2 (sqrt(1 + e^2/delta^2) - 1)
        assert r[0] ** 2 + r[1] ** 2 == pytest.approx(np.sqrt(1 + 9.0) - 1, rel=1e-12)
        assert r[2] == pytest.approx(0.0, abs=1e-9)

    def test_jacobian(self):
        cam, pts, px, lines = self.setup_lines(seed=9)
        px = px + np.random.default_rng(0).normal(0, 2.0, px.shape)
        problem = constrained_pnp_problem(corr(px, pts, lines), cam.intrinsics, corr(px[:4], pts[:4]), 0.7, 1.3)
        x = pose_to_vector(perturb_pose(cam.pose, np.random.default_rng(5), 3.0, 0.2))
        assert check_jacobian(problem, x)[0]


class TestDLT:
    def test_exact(self):
        cam, pts, px = pnp_setup(seed=10, n=12)
        pose = pose_from_dlt(corr(px, pts), cam.intrinsics)
        rot, cen = pose_error(pose, cam.pose)
        assert rot < 1e-8 and cen < 1e-8

    def test_coplanar_rejected(self):
        cam, pts, px = pnp_setup(seed=11, n=12)
        pts = pts.copy()
        pts[:, 2] = 0.0
        px = project(cam, pts)
        with pytest.raises(DegenerateConfiguration):
            pose_from_dlt(corr(px, pts), cam.intrinsics)

    def test_too_few(self):
        cam, pts, px = pnp_setup(seed=12, n=5)
        with pytest.raises(TooFewCorrespondences):
            pose_from_dlt(corr(px, pts), cam.intrinsics)
