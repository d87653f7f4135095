"""Camera accuracy against ground truth: viewing-direction angle, center distance, reprojection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .camera import Camera, project_batch
from .errors import AlignmentDegenerate, DegenerateConfiguration, IdMismatch, NumericalError
from .geometry import Similarity, similarity_align, triangulate


@dataclass
class CameraMetrics:
    rot_err_deg: float
    geodesic_deg: float
    trans_err: float
    reproj_err_pct_width: float


@dataclass
class EvalReport:
    cameras: dict  # image id -> CameraMetrics
    aligned: bool = False
    similarity: Optional[Similarity] = None
    alignment_source: Optional[str] = None  # "eval_points" or "centers"
    notes: list = field(default_factory=list)

    def mean(self) -> dict:
        out = {}
        for name in ("rot_err_deg", "geodesic_deg", "trans_err", "reproj_err_pct_width"):
            vals = [getattr(m, name) for m in self.cameras.values() if np.isfinite(getattr(m, name))]
            out[name] = float(np.mean(vals)) if vals else float("nan")
        return out

    def to_json(self) -> str:
        def clean(v):
            return None if not math.isfinite(v) else float(v)
        body = {
            "aligned": self.aligned,
            "alignment_source": self.alignment_source,
            "cameras": {cid: {k: clean(v) for k, v in vars(m).items()} for cid, m in sorted(self.cameras.items())},
            "mean": {k: clean(v) for k, v in self.mean().items()},
        }
        if self.similarity is not None:
            body["similarity"] = {"scale": self.similarity.scale,
                                  "rotation": np.asarray(self.similarity.rotation).tolist(),
                                  "translation": np.asarray(self.similarity.translation).tolist()}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        head = f"{'image':<12}{'rot_deg':>12}{'geodesic_deg':>14}{'trans':>12}{'reproj_%w':>12}"
        rows = [head, "-" * len(head)]

        def line(name, m):
            return (f"{name:<12}{m['rot_err_deg']:>12.6f}{m['geodesic_deg']:>14.6f}"
                    f"{m['trans_err']:>12.6f}{m['reproj_err_pct_width']:>12.6f}")
        for cid in sorted(self.cameras):
            rows.append(line(cid, vars(self.cameras[cid])))
        rows.append("-" * len(head))
        rows.append(line("mean", self.mean()))
        return "\n".join(rows) + "\n"


def viewing_angle_deg(a: Camera, b: Camera) -> float:
    c = float(np.clip(a.pose.viewing_direction @ b.pose.viewing_direction, -1.0, 1.0))
    return math.degrees(math.acos(c))


def geodesic_deg(a: Camera, b: Camera) -> float:
    M = a.pose.R @ b.pose.R.T
    c = float(np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0))
    return math.degrees(math.acos(c))


def _project(camera: Camera, X):
    k = camera.intrinsics
    return project_batch(camera.pose.R, camera.pose.c, k.focal_px, k.k1, k.k2, k.principal_point, X)


def reprojection_pct_width(est: Camera, truth: Camera, points) -> float:
    """Mean pixel distance between projections of ``points`` by both cameras, in % of width."""
    if points is None or len(points) == 0:
        return float("nan")
    X = np.asarray(points, dtype=float).reshape(-1, 3)
    ue, ze = _project(est, X)
    ut, zt = _project(truth, X)
    ok = (ze > 0) & (zt > 0)
    if not ok.any():
        return float("nan")
    return float(np.mean(np.linalg.norm(ue[ok] - ut[ok], axis=1)) / truth.width * 100.0)


def fit_alignment(estimated: dict, truth: dict, eval_points=None):
    """Similarity taking the estimated frame to the truth frame.

    Eval points are imaged by the true cameras and triangulated with the
    estimated ones, giving point pairs for the closed-form fit. With fewer
    than three such points the camera centers are used instead.
    """
    ids = sorted(estimated)
    src, dst = [], []
    if eval_points is not None:
        for X in np.asarray(eval_points, dtype=float).reshape(-1, 3):
            obs = []
            for cid in ids:
                uv, z = _project(truth[cid], X[None])
                if z[0] > 0 and truth[cid].intrinsics.in_bounds(uv[0])[0]:
                    obs.append((estimated[cid], uv[0]))
            if len(obs) < 2:
                continue
            try:
                src.append(triangulate(obs, min_angle_deg=0.5))
                dst.append(X)
            except NumericalError:
                continue
    source = "eval_points"
    if len(src) < 3:
        src = [estimated[c].pose.c for c in ids]
        dst = [truth[c].pose.c for c in ids]
        source = "centers"
    try:
        return similarity_align(np.array(src), np.array(dst)), source
    except DegenerateConfiguration as exc:
        raise AlignmentDegenerate(str(exc)) from exc


def compare_cameras(estimated: dict, truth: dict, eval_points=None, align: bool = False) -> EvalReport:
    if set(estimated) != set(truth):
        missing = sorted(set(truth) - set(estimated))
        extra = sorted(set(estimated) - set(truth))
        raise IdMismatch(f"image ids differ: missing {missing}, unexpected {extra}")
    report = EvalReport({}, aligned=align)
    est = dict(estimated)
    if align:
        sim, source = fit_alignment(estimated, truth, eval_points)
        est = {cid: sim.apply_camera(cam) for cid, cam in estimated.items()}
        report.similarity = sim
        report.alignment_source = source
    for cid in sorted(truth):
        e, t = est[cid], truth[cid]
        report.cameras[cid] = CameraMetrics(
            viewing_angle_deg(e, t),
            geodesic_deg(e, t),
            float(np.linalg.norm(e.pose.c - t.pose.c)),
            reprojection_pct_width(e, t, eval_points),
        )
    return report
