import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsfm.camera import Pose, project
from anchorsfm.errors import AlignmentDegenerate, IdMismatch
from anchorsfm.evaluate import compare_cameras, geodesic_deg, viewing_angle_deg
from anchorsfm.geometry import Similarity

import oracles
from helpers import random_rotation, scene


def truth_set():
    scn = scene("orbit")
    return scn.cameras, scn.eval_points


def rigid(cams, Q, t, s=1.0):
    return {cid: c.with_pose(Pose.from_matrix(c.pose.R @ Q.T, s * Q @ c.pose.c + t)) for cid, c in cams.items()}


def test_identity_is_zero():
    cams, pts = truth_set()
    rep = compare_cameras(cams, cams, pts)
    for m in rep.cameras.values():
        assert m.rot_err_deg == 0 and m.trans_err == 0 and m.reproj_err_pct_width == 0


def test_five_degree_rotation():
    cams, _ = truth_set()
    moved = {}
    for cid, c in cams.items():
        axis = c.pose.R[0]  # camera x axis, orthogonal to the viewing direction
        A = oracles.axis_angle_matrix(axis, np.radians(5.0))
        moved[cid] = c.with_pose(Pose.from_matrix(c.pose.R @ A.T, c.pose.c))
    rep = compare_cameras(moved, cams)
    for cid, m in rep.cameras.items():
        assert m.rot_err_deg == pytest.approx(5.0, abs=1e-9)
        assert m.geodesic_deg == pytest.approx(5.0, abs=1e-9)
        assert oracles.viewing_angle_deg(moved[cid].pose.R, cams[cid].pose.R) == pytest.approx(5.0, abs=1e-9)


def test_roll_changes_geodesic_only():
    cams, _ = truth_set()
    c = next(iter(cams.values()))
    A = oracles.axis_angle_matrix(c.pose.viewing_direction, np.radians(7.0))
    rolled = c.with_pose(Pose.from_matrix(c.pose.R @ A.T, c.pose.c))
    assert viewing_angle_deg(rolled, c) == pytest.approx(0.0, abs=1e-6)
    assert geodesic_deg(rolled, c) == pytest.approx(7.0, abs=1e-9)


def test_id_mismatch():
    cams, _ = truth_set()
    partial = dict(list(cams.items())[:-1])
    with pytest.raises(IdMismatch):
        compare_cameras(partial, cams)


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_rigid_invariance_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    cams, pts = truth_set()
    noisy = {cid: c.with_pose(Pose(tuple(c.pose.rotated(rng.normal(0, 0.02, 3)).quaternion),
                                   tuple(c.pose.c + rng.normal(0, 0.05, 3)))) for cid, c in cams.items()}
    Q, t = random_rotation(rng), rng.normal(0, 5, 3)
    a = compare_cameras(noisy, cams, pts)
    b = compare_cameras(rigid(noisy, Q, t), rigid(cams, Q, t), pts @ Q.T + t)
    back = compare_cameras(cams, noisy)
    for cid in cams:
        ma, mb = a.cameras[cid], b.cameras[cid]
        assert mb.rot_err_deg == pytest.approx(ma.rot_err_deg, abs=1e-6)
        assert mb.trans_err == pytest.approx(ma.trans_err, abs=1e-9)
        assert mb.reproj_err_pct_width == pytest.approx(ma.reproj_err_pct_width, abs=1e-8)
        assert back.cameras[cid].rot_err_deg == pytest.approx(ma.rot_err_deg, abs=1e-9)
        assert back.cameras[cid].trans_err == ma.trans_err


def test_trans_err_triangle_inequality():
    rng = np.random.default_rng(0)
    cams, _ = truth_set()
    b = rigid(cams, np.eye(3), rng.normal(0, 0.3, 3))
    c = rigid(cams, np.eye(3), rng.normal(0, 0.3, 3))
    ab, bc, ac = compare_cameras(cams, b), compare_cameras(b, c), compare_cameras(cams, c)
    for cid in cams:
        assert ac.cameras[cid].trans_err <= ab.cameras[cid].trans_err + bc.cameras[cid].trans_err + 1e-12


@pytest.mark.parametrize("use_points", [True, False])
def test_alignment_removes_similarity(use_points):
    rng = np.random.default_rng(1)
    cams, pts = truth_set()
    Q, t = random_rotation(rng), rng.normal(0, 4, 3)
    moved = rigid(cams, Q, t, s=2.5)
    rep = compare_cameras(moved, cams, pts if use_points else None, align=True)
    assert rep.alignment_source == ("eval_points" if use_points else "centers")
    for m in rep.cameras.values():
        assert m.rot_err_deg < 1e-6 and m.trans_err < 1e-8
    assert rep.similarity.scale == pytest.approx(1 / 2.5, rel=1e-9)


def test_alignment_degenerate():
    cams, _ = truth_set()
    same = {cid: c.with_pose(Pose(c.pose.quaternion, (1.0, 2.0, 3.0))) for cid, c in cams.items()}
    with pytest.raises(AlignmentDegenerate):
        compare_cameras(same, same, None, align=True)


def test_report_serialization():
    cams, pts = truth_set()
    rep = compare_cameras(cams, cams, pts)
    body = json.loads(rep.to_json())
    assert set(body["cameras"]) == set(cams)
    assert body["mean"]["rot_err_deg"] == 0
    table = rep.to_table()
    assert "rot_deg" in table and "reproj_%w" in table
    assert len(table.strip().splitlines()) == len(cams) + 4
    nan_rep = compare_cameras(cams, cams)
    assert json.loads(nan_rep.to_json())["mean"]["reproj_err_pct_width"] is None


def test_similarity_preserves_pixels():
    rng = np.random.default_rng(2)
    cams, pts = truth_set()
    sim = Similarity(1.7, random_rotation(rng), rng.normal(0, 1, 3), 0.0)
    for cam in cams.values():
        np.testing.assert_allclose(project(sim.apply_camera(cam), sim.apply(pts)), project(cam, pts), atol=1e-9)
