"""Plain-text scene files: images, matches, anchors, cameras, tracks, event log."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .camera import Camera, Pose
from .tracks import FeatureMatch

log = logging.getLogger(__name__)


def fmt(x: float) -> str:
    """Round-trip float formatting used by every writer."""
    return f"{float(x):.17g}"


def _data_lines(path):
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield lineno, s.split()


@dataclass(frozen=True)
class ImageInfo:
    image_id: str
    width: int
    height: int
    focal_px: Optional[float] = None  # focal from image metadata, if known


def read_images(path) -> dict:
    out = {}
    for lineno, parts in _data_lines(path):
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'id width height focal|-'")
        focal = None if parts[3] == "-" else float(parts[3])
        out[parts[0]] = ImageInfo(parts[0], int(parts[1]), int(parts[2]), focal)
    return out


def write_images(path, images: dict) -> None:
    lines = ["# id width height focal_px (- when unknown)"]
    for iid in sorted(images):
        im = images[iid]
        lines.append(f"{iid} {im.width} {im.height} {'-' if im.focal_px is None else fmt(im.focal_px)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_matches(path) -> list:
    matches = []
    for lineno, parts in _data_lines(path):
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 'image_a image_b ua va ub vb'")
        a, b = parts[0], parts[1]
        ua, va, ub, vb = (float(v) for v in parts[2:])
        matches.append(FeatureMatch(a, b, (ua, va), (ub, vb)))
    return matches


def write_matches(path, matches) -> None:
    lines = ["# image_a image_b ua va ub vb"]
    for m in matches:
        lines.append(" ".join([m.image_a, m.image_b] + [fmt(v) for v in (*m.pixel_a, *m.pixel_b)]))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class AnchorAnnotation:
    """2D-3D correspondences for one image plus its initial pose guess."""

    image_id: str
    init_pose: Optional[Pose]
    fov_deg: Optional[float]
    pixels: np.ndarray  # (n, 2)
    points: np.ndarray  # (n, 3)


def read_anchor(path) -> AnchorAnnotation:
    lines = list(_data_lines(path))
    if not lines or lines[0][1][0] != "image":
        raise ValueError(f"{path}: anchor file must start with an 'image <id> ...' header")
    head = lines[0][1]
    image_id = head[1]
    fields = {}
    i = 2
    sizes = {"init_quat": 4, "init_center": 3, "fov_deg": 1}
    while i < len(head):
        key = head[i]
        if key not in sizes:
            raise ValueError(f"{path}: unknown header field {key!r}")
        fields[key] = [float(v) for v in head[i + 1:i + 1 + sizes[key]]]
        i += 1 + sizes[key]
    pose = None
    if "init_quat" in fields and "init_center" in fields:
        pose = Pose(tuple(fields["init_quat"]), tuple(fields["init_center"]))
    fov = fields.get("fov_deg", [None])[0]
    rows = []
    for lineno, parts in lines[1:]:
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'u v X Y Z'")
        rows.append([float(v) for v in parts])
    arr = np.array(rows, dtype=float).reshape(-1, 5)
    return AnchorAnnotation(image_id, pose, fov, arr[:, :2], arr[:, 2:])


def write_anchor(path, ann: AnchorAnnotation) -> None:
    head = ["image", ann.image_id]
    if ann.init_pose is not None:
        head += ["init_quat"] + [fmt(v) for v in ann.init_pose.quaternion]
        head += ["init_center"] + [fmt(v) for v in ann.init_pose.center]
    if ann.fov_deg is not None:
        head += ["fov_deg", fmt(ann.fov_deg)]
    lines = [" ".join(head)]
    for (u, v), (x, y, z) in zip(ann.pixels, ann.points):
        lines.append(" ".join(fmt(t) for t in (u, v, x, y, z)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_anchor_dir(directory) -> dict:
    d = Path(directory)
    if not d.is_dir():
        return {}
    out = {}
    for p in sorted(d.glob("*.txt")):
        ann = read_anchor(p)
        out[ann.image_id] = ann
    return out


def cameras_to_json(cameras: dict) -> str:
    body = {"cameras": {cid: cameras[cid].to_dict() for cid in sorted(cameras)}}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def write_cameras(path, cameras: dict) -> None:
    Path(path).write_text(cameras_to_json(cameras))


def read_cameras(path) -> dict:
    data = json.loads(Path(path).read_text())
    cams = data.get("cameras", data)
    return {cid: Camera.from_dict(d) for cid, d in cams.items()}


def write_tracks(path, tracks) -> int:
    """Write `id X Y Z n_obs` for every track with a point; returns the count."""
    lines = ["# id X Y Z n_obs"]
    for i, t in enumerate(tracks):
        if t.point is None:
            continue
        x, y, z = t.point
        lines.append(f"{i} {fmt(x)} {fmt(y)} {fmt(z)} {len(t.observations)}")
    Path(path).write_text("\n".join(lines) + "\n")
    return len(lines) - 1


def read_tracks(path) -> dict:
    out = {}
    for _, parts in _data_lines(path):
        out[int(parts[0])] = (np.array([float(v) for v in parts[1:4]]), int(parts[4]))
    return out


def read_points(path) -> np.ndarray:
    rows = [[float(v) for v in parts[:3]] for _, parts in _data_lines(path)]
    return np.array(rows, dtype=float).reshape(-1, 3)


def write_points(path, points) -> None:
    lines = ["# X Y Z"] + [" ".join(fmt(v) for v in p) for p in np.asarray(points).reshape(-1, 3)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path):
    """Point cloud with normals: `X Y Z nx ny nz` per line."""
    rows = [[float(v) for v in parts[:6]] for _, parts in _data_lines(path)]
    arr = np.array(rows, dtype=float).reshape(-1, 6)
    return arr[:, :3], arr[:, 3:]


def write_event_log(path, events) -> None:
    Path(path).write_text("".join(e + "\n" for e in events))
