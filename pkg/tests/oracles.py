"""Independent reference implementations used to check the package.

Nothing here imports the geometry code under test: every oracle is written
from the textbook formula with plain Python or numpy, so agreement between
the two is evidence rather than tautology.
"""

from __future__ import annotations

import colorsys
import math

import numpy as np


def quat_matrix(q):
    """Rotation matrix of unit quaternion (w, x, y, z), written out explicitly."""
    w, x, y, z = (float(v) for v in q)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_matrix(axis, angle):
    """Rodrigues formula."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def project_scalar(q, center, f, k1, k2, width, height, X):
    """Pinhole projection with two-term radial distortion, one point at a time."""
    R = quat_matrix(q)
    d = [X[i] - center[i] for i in range(3)]
    xc = [sum(R[r][i] * d[i] for i in range(3)) for r in range(3)]
    if xc[2] <= 0:
        raise ValueError("behind camera")
    x, y = xc[0] / xc[2], xc[1] / xc[2]
    r2 = x * x + y * y
    s = 1 + k1 * r2 + k2 * r2 * r2
    return (f * s * x + width / 2.0, f * s * y + height / 2.0)


def camera_matrix(f, width, height):
    return np.array([[f, 0, width / 2.0], [0, f, height / 2.0], [0, 0, 1.0]])


def skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def fundamental_from_cameras(Ka, Ra, ca, Kb, Rb, cb):
    """F with x_b^T F x_a = 0 for distortion-free cameras given by K, R, center.

    Relative motion a -> b: R = Rb Ra^T, t = Rb (ca - cb); E = [t]x R.
    """
    R = Rb @ Ra.T
    t = Rb @ (np.asarray(ca, float) - np.asarray(cb, float))
    E = skew(t) @ R
    return np.linalg.inv(Kb).T @ E @ np.linalg.inv(Ka)


def rotation_homography(Ka, Ra, Kb, Rb):
    """Homography between two cameras sharing a center."""
    return Kb @ Rb @ Ra.T @ np.linalg.inv(Ka)


def sampson_scalar(F, pa, pb):
    xa = np.array([pa[0], pa[1], 1.0])
    xb = np.array([pb[0], pb[1], 1.0])
    Fx = F @ xa
    Ftx = F.T @ xb
    num = float(xb @ F @ xa) ** 2
    den = Fx[0] ** 2 + Fx[1] ** 2 + Ftx[0] ** 2 + Ftx[1] ** 2
    return math.sqrt(num / den)


def point_line_distance(line, p):
    a, b, c = line
    return abs(a * p[0] + b * p[1] + c) / math.hypot(a, b)


def central_difference_jacobian(fun, x, n, plus=None, h=1e-6):
    """Jacobian of ``fun`` at ``x`` with respect to an ``n``-dimensional increment."""
    plus = plus or (lambda p, d: p + d)
    f0 = np.asarray(fun(x))
    J = np.zeros((f0.size, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        J[:, i] = (np.asarray(fun(plus(x, e))) - np.asarray(fun(plus(x, -e)))).ravel() / (2 * h)
    return J


def ray_triangle(origin, direction, a, b, c, eps=1e-12):
    """Ray/triangle hit distance via the supporting plane and barycentric coordinates."""
    o, d = np.asarray(origin, float), np.asarray(direction, float)
    a, b, c = (np.asarray(v, float) for v in (a, b, c))
    n = np.cross(b - a, c - a)
    denom = float(n @ d)
    if abs(denom) < eps:
        return None
    t = float(n @ (a - o)) / denom
    if t <= 1e-9:
        return None
    p = o + t * d
    # barycentric coordinates by sub-triangle areas (signed along n)
    area = float(n @ n)
    u = float(np.cross(c - b, p - b) @ n) / area
    v = float(np.cross(a - c, p - c) @ n) / area
    w = 1.0 - u - v
    tol = -1e-12
    if u < tol or v < tol or w < tol:
        return None
    return t


def nearest_hit(origin, direction, vertices, triangles):
    best = (None, None)
    for i, (ia, ib, ic) in enumerate(triangles):
        t = ray_triangle(origin, direction, vertices[ia], vertices[ib], vertices[ic])
        if t is not None and (best[0] is None or t < best[0]):
            best = (t, i)
    return best


def occludes(camera_center, point, normal, model_point, model_normal, gap=0.3, max_angle_deg=30.0):
    """The two-term static occlusion rule, applied literally."""
    c = np.asarray(camera_center, float)
    closer_by = np.linalg.norm(np.asarray(model_point) - c) - np.linalg.norm(np.asarray(point) - c)
    cosang = float(np.clip(np.dot(normal, model_normal), -1.0, 1.0))
    return bool(closer_by > gap or math.degrees(math.acos(cosang)) > max_angle_deg)


def hsv(rgb):
    """Per-pixel HSV through the standard library."""
    flat = np.asarray(rgb, float).reshape(-1, 3)
    return np.array([colorsys.rgb_to_hsv(*p) for p in flat]).reshape(np.shape(rgb))


def hue_distance(h1, h2):
    d = abs(h1 - h2) % 1.0
    return min(d, 1.0 - d)


def umeyama(src, dst):
    """Least-squares similarity dst ~ s R src + t."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    ms, md = src.mean(0), dst.mean(0)
    A, B = src - ms, dst - md
    U, S, Vt = np.linalg.svd(B.T @ A / len(src))
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var = np.mean(np.sum(A * A, axis=1))
    s = np.trace(np.diag(S) @ D) / var
    return s, R, md - s * R @ ms


def viewing_angle_deg(Ra, Rb):
    da, db = Ra[2], Rb[2]
    return math.degrees(math.acos(max(-1.0, min(1.0, float(da @ db)))))
