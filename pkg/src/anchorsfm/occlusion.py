"""Static occlusions (point cloud vs. mesh) and dynamic occlusions (time-lapse median)."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .camera import Camera, project_batch, ray_directions
from .errors import TooFewImages
from .mesh import TriangleMesh, intersect_rays_mesh

log = logging.getLogger(__name__)

DEPTH_GAP_M = 0.3
NORMAL_ANGLE_DEG = 30.0
DYNAMIC_THRESHOLD = 0.05


class OcclusionReason(str, enum.Enum):
    DEPTH_GAP = "DepthGap"
    NORMAL_DISAGREEMENT = "NormalDisagreement"
    NO_INTERSECTION = "NoIntersection"
    NONE = "None"  # hit the mesh, neither test fired


@dataclass(frozen=True)
class OcclusionVerdict:
    index: int
    point: tuple
    model_point: Optional[tuple]
    occluding: bool
    reason: OcclusionReason


def occlusion_rule(camera_center, point, normal, model_point, model_normal,
                   depth_gap=DEPTH_GAP_M, max_angle_deg=NORMAL_ANGLE_DEG):
    """The two-term test for one point; returns (occluding, reason)."""
    gap = np.linalg.norm(model_point - camera_center) - np.linalg.norm(point - camera_center)
    if gap > depth_gap:
        return True, OcclusionReason.DEPTH_GAP
    cosang = np.clip(float(np.dot(normal, model_normal)), -1.0, 1.0)
    if np.degrees(np.arccos(cosang)) > max_angle_deg:
        return True, OcclusionReason.NORMAL_DISAGREEMENT
    return False, OcclusionReason.NONE


def classify_static_occlusions(points, normals, mesh: TriangleMesh, camera: Camera,
                               depth_gap=DEPTH_GAP_M, max_angle_deg=NORMAL_ANGLE_DEG) -> list:
    """Label each cloud point as occluding the mesh or not.

    A point occludes when the mesh surface behind its pixel is more than
    ``depth_gap`` farther from the camera, or when its normal differs from
    the mesh normal by more than ``max_angle_deg``. Points behind the camera
    are skipped (logged); the returned verdicts carry their input index.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    N = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(N) != len(P):
        raise ValueError("points and normals differ in length")
    k = camera.intrinsics
    uv, z = project_batch(camera.pose.R, camera.pose.c, k.focal_px, k.k1, k.k2, k.principal_point, P)
    front = z > 0
    for i in np.flatnonzero(~front):
        log.warning("point %d is behind the camera; skipped", i)
    idx = np.flatnonzero(front)
    c = camera.pose.c
    dirs = ray_directions(camera, uv[idx]) if len(idx) else np.zeros((0, 3))
    dist, tri = intersect_rays_mesh(mesh, np.broadcast_to(c, dirs.shape), dirs)
    verdicts = []
    for j, i in enumerate(idx):
        p = tuple(P[i])
        if tri[j] < 0:
            verdicts.append(OcclusionVerdict(int(i), p, None, False, OcclusionReason.NO_INTERSECTION))
            continue
        pm = c + dist[j] * dirs[j]
        occ, why = occlusion_rule(c, P[i], N[i], pm, mesh.normals[tri[j]], depth_gap, max_angle_deg)
        verdicts.append(OcclusionVerdict(int(i), p, tuple(pm), occ, why))
    return verdicts


# ---------------------------------------------------------------------------
# dynamic occlusion


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone HSV for float RGB in [0, 1]; hue in [0, 1)."""
    rgb = np.asarray(rgb, dtype=float)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0) % 1.0
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_squared_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-channel squared HSV difference; hue uses the shorter arc scaled to [0, 1]."""
    d = np.abs(a - b)
    d[..., 0] = 2.0 * np.minimum(d[..., 0], 1.0 - d[..., 0])
    return d * d


def warp_to_reference(image: np.ndarray, H: np.ndarray, shape) -> np.ndarray:
    """Sample ``image`` at H^-1 x for every reference pixel x; NaN outside the source."""
    h, w = shape[:2]
    vs, us = np.mgrid[0:h, 0:w].astype(float)
    ref = np.stack([us.ravel(), vs.ravel(), np.ones(h * w)])
    src = np.linalg.solve(np.asarray(H, dtype=float), ref)
    su, sv = src[0] / src[2], src[1] / src[2]
    sh, sw = image.shape[:2]
    inside = (src[2] > 0) & (su >= 0) & (su <= sw - 1) & (sv >= 0) & (sv <= sh - 1)
    out = np.full((h * w, image.shape[2]), np.nan)
    coords = np.stack([sv[inside], su[inside]])
    for ch in range(image.shape[2]):
        out[inside, ch] = ndimage.map_coordinates(image[..., ch], coords, order=1, mode="nearest")
    return out.reshape(h, w, image.shape[2])


@dataclass
class DynamicMaskResult:
    background: np.ndarray  # float RGB in [0, 1]
    mask: np.ndarray  # bool (h, w)


def compute_background_and_dynamic_mask(reference: np.ndarray, aligned: Sequence, threshold=DYNAMIC_THRESHOLD,
                                        sigma: float = 1.0) -> DynamicMaskResult:
    """Median background of a registered time lapse and the pixels that differ from it.

    ``aligned`` holds (image, H) pairs with H mapping image pixels to reference
    pixels. The reference takes part in the median. The squared HSV
    difference is Gaussian-smoothed (5x5 support) before thresholding.
    """
    if len(aligned) < 2:
        raise TooFewImages(f"{len(aligned)} additional images, need 2")
    ref = np.asarray(reference, dtype=float)
    stack = [ref] + [warp_to_reference(np.asarray(img, dtype=float), H, ref.shape) for img, H in aligned]
    stack = np.stack(stack)
    with np.errstate(all="ignore"):
        background = np.nanmedian(stack, axis=0)
    background = np.where(np.isnan(background), ref, background)
    diff = hsv_squared_difference(rgb_to_hsv(ref), rgb_to_hsv(background))
    smooth = np.stack([ndimage.gaussian_filter(diff[..., ch], sigma, mode="nearest", truncate=2.0)
                       for ch in range(3)], axis=-1)
    mask = np.any(smooth > threshold, axis=-1)
    return DynamicMaskResult(background, mask)


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = np.repeat(arr[..., None], 3, axis=2) * 255
    elif np.issubdtype(arr.dtype, np.floating):
        arr = np.clip(np.round(arr * 255.0), 0, 255)
    Image.fromarray(arr.astype(np.uint8), "RGB").save(Path(path), format="PPM")
