"""RANSAC for fundamental-matrix match pruning, homography gating and PnP."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .camera import Camera, Pose, project_batch
from .errors import NoConsensus, NumericalError, SfMError, TooFewCorrespondences, TooFewMatches
from .geometry import (
    estimate_fundamental,
    estimate_homography,
    sampson_distance,
    symmetric_transfer_error,
)
from .lm import LMOptions
from .pnp import solve_pnp
from .tracks import FeatureMatch, match_arrays

log = logging.getLogger(__name__)

FUNDAMENTAL_THRESHOLD_FRACTION = 0.005
HOMOGRAPHY_THRESHOLD_FRACTION = 0.01
PNP_THRESHOLD_FRACTION = 0.01
HOMOGRAPHY_GATE_FRACTION = 0.8


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 2000
    inlier_threshold: Optional[float] = None  # pixels; None -> stage default from image width
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.inlier_threshold is not None and not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")

    def threshold(self, image_width: Optional[float], fraction: float) -> float:
        if self.inlier_threshold is not None:
            return self.inlier_threshold
        if image_width is None:
            raise ValueError("inlier_threshold not set and no image width to derive it from")
        return fraction * image_width


@dataclass
class Consensus:
    model: object
    inliers: np.ndarray  # boolean mask
    residuals: np.ndarray
    trials: int

    @property
    def count(self) -> int:
        return int(self.inliers.sum())


def required_trials(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    if inlier_ratio <= 0:
        return math.inf
    p_good = inlier_ratio ** sample_size
    if p_good >= 1:
        return 1
    return math.log(1 - confidence) / math.log(1 - p_good)


def ransac(n: int, sample_size: int, fit: Callable, residuals: Callable, threshold: float,
           config: RansacConfig, rng: Optional[np.random.Generator] = None) -> Optional[Consensus]:
    """Generic hypothesize-and-verify loop.

    Trials run in index order; the best consensus is the largest inlier set,
    ties going to the lower mean inlier residual and then the earlier trial.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    best = None
    best_key = None
    needed = config.max_iterations
    trial = 0
    while trial < min(needed, config.max_iterations):
        sample = rng.choice(n, size=sample_size, replace=False)
        trial += 1
        try:
            model = fit(np.sort(sample))
        except (NumericalError, SfMError, np.linalg.LinAlgError):
            continue
        if model is None:
            continue
        res = residuals(model)
        mask = res < threshold
        count = int(mask.sum())
        if count == 0:
            continue
        key = (-count, float(res[mask].mean()))
        if best_key is None or key < best_key:
            best_key = key
            best = Consensus(model, mask, res, trial)
            needed = required_trials(count / n, sample_size, config.confidence)
    if best is not None:
        best.trials = trial
    return best


def _refit(consensus: Consensus, fit_all: Callable, residuals: Callable, threshold: float, min_count: int,
           rounds: int = 5) -> Consensus:
    """Refit on the inliers until the inlier set is stable."""
    current = consensus
    for _ in range(rounds):
        idx = np.flatnonzero(current.inliers)
        if len(idx) < min_count:
            break
        try:
            model = fit_all(idx, current.model)
        except (NumericalError, SfMError, np.linalg.LinAlgError):
            break
        res = residuals(model)
        mask = res < threshold
        if mask.sum() < min_count:
            break
        changed = not np.array_equal(mask, current.inliers)
        current = Consensus(model, mask, res, current.trials)
        if not changed:
            break
    return current


@dataclass
class FundamentalResult:
    inliers: list
    F: np.ndarray
    inlier_mask: np.ndarray
    residuals: np.ndarray


def prune_matches_fundamental(matches: Sequence[FeatureMatch], config: RansacConfig,
                              image_width: Optional[float] = None) -> FundamentalResult:
    """Keep the matches consistent with a RANSAC fundamental matrix (Sampson distance)."""
    if len(matches) < 8:
        raise TooFewMatches(f"{len(matches)} matches, need 8")
    pa, pb = match_arrays(matches)
    thr = config.threshold(image_width, FUNDAMENTAL_THRESHOLD_FRACTION)

    def fit(idx, _model=None):
        return estimate_fundamental(pa[idx], pb[idx])

    def residuals(F):
        return sampson_distance(F, pa, pb)

    best = ransac(len(matches), 8, fit, residuals, thr, config)
    if best is None or best.count < 8:
        raise NoConsensus("fewer than 8 matches agree on a fundamental matrix")
    best = _refit(best, fit, residuals, thr, 8)
    mask = best.inliers
    return FundamentalResult([m for m, keep in zip(matches, mask) if keep], best.model, mask, best.residuals)


@dataclass
class HomographyGateResult:
    passes: bool
    H: Optional[np.ndarray]
    inlier_fraction: float
    inlier_mask: Optional[np.ndarray] = None


def homography_gate(matches: Sequence[FeatureMatch], config: RansacConfig, image_width: Optional[float] = None,
                    required_fraction: float = HOMOGRAPHY_GATE_FRACTION) -> HomographyGateResult:
    """Does a single homography explain at least ``required_fraction`` of the matches?"""
    if len(matches) < 4:
        raise TooFewMatches(f"{len(matches)} matches, need 4")
    pa, pb = match_arrays(matches)
    thr = config.threshold(image_width, HOMOGRAPHY_THRESHOLD_FRACTION)

    def fit(idx, _model=None):
        return estimate_homography(pa[idx], pb[idx])

    def residuals(H):
        return symmetric_transfer_error(H, pa, pb)

    best = ransac(len(matches), 4, fit, residuals, thr, config)
    if best is None:
        return HomographyGateResult(False, None, 0.0)
    best = _refit(best, fit, residuals, thr, 4)
    frac = best.count / len(matches)
    passes = frac >= required_fraction
    return HomographyGateResult(passes, best.model if passes else None, frac, best.inliers)


@dataclass
class PnPRansacResult:
    pose: Pose
    inliers: np.ndarray  # indices into the correspondence list
    residuals: np.ndarray


def reprojection_errors(camera: Camera, pixels: np.ndarray, points: np.ndarray) -> np.ndarray:
    k = camera.intrinsics
    uv, z = project_batch(camera.pose.R, camera.pose.c, k.focal_px, k.k1, k.k2, k.principal_point, points)
    err = np.linalg.norm(uv - pixels, axis=1)
    return np.where(z > 0, err, np.inf)


def pnp_ransac(correspondences, camera_init: Camera, config: RansacConfig) -> PnPRansacResult:
    """Robust pose from 2D-3D correspondences.

    Hypotheses come from Levenberg-Marquardt PnP on 4-point samples started
    at ``camera_init``; the best consensus is refined on all its inliers.
    Intrinsics are taken from ``camera_init`` and kept fixed.
    """
    if len(correspondences) < 4:
        raise TooFewCorrespondences(f"{len(correspondences)} correspondences, need 4")
    intr = camera_init.intrinsics
    pixels = np.array([c.pixel for c in correspondences], dtype=float)
    points = np.array([c.point for c in correspondences], dtype=float)
    thr = config.threshold(intr.width, PNP_THRESHOLD_FRACTION)
    hyp_opts = LMOptions(max_iterations=30)

    def fit(idx):
        return solve_pnp([correspondences[i] for i in idx], intr, camera_init.pose, hyp_opts)

    def residuals(pose):
        return reprojection_errors(Camera(intr, pose), pixels, points)

    def fit_all(idx, pose):
        return solve_pnp([correspondences[i] for i in idx], intr, pose)

    best = ransac(len(correspondences), 4, fit, residuals, thr, config)
    if best is None or best.count < 4:
        raise NoConsensus("no pose hypothesis gathered 4 inliers")
    best = _refit(best, fit_all, residuals, thr, 4)
    return PnPRansacResult(best.model, np.flatnonzero(best.inliers), best.residuals)
