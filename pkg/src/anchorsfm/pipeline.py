"""Incremental registration of an image collection against a mesh.

Anchor images are posed from 2D-3D mesh annotations. Other images join by
homography transfer of anchor annotations (near pure rotations), or by PnP
against existing 3D tracks refined with epipolar lines of the anchor
annotations. When the match graph cannot reach an image, another annotation
is requested from a correspondence provider. Every registration is followed
by triangulation and an anchor-constrained bundle adjustment.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .bundle import BAMode, BundleProblem, bundle_adjust
from .camera import Camera, Intrinsics, pixel_ray
from .errors import (
    EmptyUnregisteredSet,
    NoConsensus,
    NumericalError,
    ProviderDeclined,
    TooFewCorrespondences,
    TooFewMatches,
    UnderConstrained,
)
from .geometry import EpipolarLine, apply_homography, triangulate
from .io import AnchorAnnotation, ImageInfo, read_anchor
from .lm import LMOptions
from .mesh import TriangleMesh, intersect_ray_mesh
from .pnp import Correspondence2D3D, pose_from_dlt, solve_pnp, solve_pnp_constrained
from .ransac import RansacConfig, homography_gate, pnp_ransac, prune_matches_fundamental, reprojection_errors
from .tracks import FeatureMatch, TrackGraph

log = logging.getLogger(__name__)

TRACK_MATCH_THRESHOLD = 60
OUTLIER_FRACTION_OF_WIDTH = 0.01


class Strategy(str, enum.Enum):
    TRACK_PNP = "TrackPnP"
    NEEDS_ANCHOR = "NeedsAnchor"


class CorrespondenceProvider(Protocol):
    def request(self, image_id: str, points: np.ndarray) -> Optional[AnchorAnnotation]:
        """Pixels of ``points`` (or the provider's own annotation) in ``image_id``, or None to decline."""


class FileProvider:
    """Serves annotations from ``<directory>/<image_id>.txt`` anchor files."""

    def __init__(self, directory):
        self.directory = Path(directory) if directory is not None else None

    def request(self, image_id, points=None):
        if self.directory is None:
            return None
        path = self.directory / f"{image_id}.txt"
        if not path.is_file():
            return None
        return read_anchor(path)


class NullProvider:
    def request(self, image_id, points=None):
        return None


@dataclass
class PipelineOptions:
    mode: BAMode = BAMode.HARD
    seed: int = 0
    fov_deg: float = 50.0
    track_threshold: int = TRACK_MATCH_THRESHOLD
    min_angle_deg: float = 2.0
    ransac_iterations: int = 2000
    fundamental_threshold: Optional[float] = None  # px; default 0.005 * width
    homography_threshold: Optional[float] = None  # px; default 0.01 * width
    pnp_threshold: Optional[float] = None  # px; default 0.01 * width
    anchor_weight: float = 100.0
    reprojection_weight: float = 1.0
    line_weight: float = 1.0
    intrinsics_min_cameras: int = 3  # bundle keeps f, k1, k2 fixed while fewer cameras are registered
    bundle_options: LMOptions = field(default_factory=LMOptions)

    def __post_init__(self):
        self.mode = BAMode(self.mode)


@dataclass
class RegistrationState:
    registered: dict = field(default_factory=dict)  # image id -> Camera
    unregistered: set = field(default_factory=set)
    anchors: list = field(default_factory=list)  # registration order
    track_graph: TrackGraph = field(default_factory=TrackGraph)
    event_log: list = field(default_factory=list)
    annotations: dict = field(default_factory=dict)  # anchor id -> AnchorAnnotation

    def log(self, event: str):
        self.event_log.append(event)
        log.info(event)

    def check(self):
        assert not (set(self.registered) & self.unregistered)
        assert set(self.anchors) <= set(self.registered)


def _f(x: float) -> str:
    return f"{x:.6f}"


class Registrar:
    """Holds the inputs of one reconstruction and mutates a RegistrationState."""

    def __init__(self, images: dict, matches, mesh: Optional[TriangleMesh],
                 provider: Optional[CorrespondenceProvider] = None, options: Optional[PipelineOptions] = None):
        self.images = dict(images)
        self.matches = list(matches)
        self.mesh = mesh
        self.provider = provider or NullProvider()
        self.options = options or PipelineOptions()
        self.state = RegistrationState(unregistered=set(self.images))
        self.pruned = {}  # (a, b) with a < b -> list of FeatureMatch oriented a -> b
        self.fundamental = {}  # (a, b) -> F with x_b^T F x_a = 0
        self._gate_cache = {}
        self._step = 0

    # -- helpers ---------------------------------------------------------------

    def intrinsics_for(self, image_id, fov_deg=None) -> Intrinsics:
        info = self.images[image_id]
        if info.focal_px is not None:
            return Intrinsics(info.focal_px, 0.0, 0.0, info.width, info.height)
        return Intrinsics.from_fov(fov_deg or self.options.fov_deg, info.width, info.height)

    def _ransac(self, threshold, salt: int) -> RansacConfig:
        return RansacConfig(self.options.ransac_iterations, threshold, 0.999, self.options.seed + salt)

    def pair_matches(self, a, b) -> list:
        """Pruned matches oriented from image a to image b."""
        if a < b:
            return self.pruned.get((a, b), [])
        return [FeatureMatch(m.image_b, m.image_a, m.pixel_b, m.pixel_a) for m in self.pruned.get((b, a), [])]

    def pair_fundamental(self, a, b) -> Optional[np.ndarray]:
        if a < b:
            return self.fundamental.get((a, b))
        F = self.fundamental.get((b, a))
        return None if F is None else F.T

    # -- stages ----------------------------------------------------------------

    def register_anchor(self, image_id, annotation: AnchorAnnotation):
        st = self.state
        if image_id not in st.unregistered:
            raise ValueError(f"image {image_id} is not awaiting registration")
        intr = self.intrinsics_for(image_id, annotation.fov_deg)
        ok = intr.in_bounds(annotation.pixels) if len(annotation.pixels) else np.zeros(0, bool)
        if not ok.all():
            st.log(f"warning anchor {image_id} dropped {int((~ok).sum())} out-of-bounds annotations")
        corr = [Correspondence2D3D(tuple(p), tuple(X)) for p, X in zip(annotation.pixels[ok], annotation.points[ok])]
        if len(corr) < 4:
            raise TooFewCorrespondences(f"anchor {image_id}: {len(corr)} correspondences, need 4")
        pts = annotation.points[ok]
        sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if sv[2] <= 1e-6 * sv[0]:
            st.log(f"warning anchor {image_id} annotations are coplanar")
        init = annotation.init_pose
        if init is None:
            init = pose_from_dlt(corr, intr)
        pose = solve_pnp(corr, intr, init)
        cam = Camera(intr, pose)
        err = reprojection_errors(cam, annotation.pixels[ok], pts)
        st.registered[image_id] = cam
        st.unregistered.discard(image_id)
        st.anchors.append(image_id)
        st.annotations[image_id] = AnchorAnnotation(image_id, pose, annotation.fov_deg,
                                                    annotation.pixels[ok], pts)
        st.log(f"register_anchor {image_id} n={len(corr)} rms_px={_f(float(np.sqrt(np.mean(err ** 2))))}")

    def prune_all_pairs(self):
        st = self.state
        groups = {}
        for m in self.matches:
            if m.image_a not in self.images or m.image_b not in self.images:
                continue
            if m.image_a < m.image_b:
                groups.setdefault((m.image_a, m.image_b), []).append(m)
            else:
                groups.setdefault((m.image_b, m.image_a), []).append(
                    FeatureMatch(m.image_b, m.image_a, m.pixel_b, m.pixel_a))
        for k, pair in enumerate(sorted(groups)):
            ms = groups[pair]
            width = self.images[pair[0]].width
            try:
                res = prune_matches_fundamental(ms, self._ransac(self.options.fundamental_threshold, k), width)
            except (TooFewMatches, NoConsensus) as exc:
                st.log(f"prune {pair[0]} {pair[1]} kept=0 total={len(ms)} reason={type(exc).__name__}")
                continue
            self.pruned[pair] = res.inliers
            self.fundamental[pair] = res.F
            st.log(f"prune {pair[0]} {pair[1]} kept={len(res.inliers)} total={len(ms)}")
        all_inliers = [m for pair in sorted(self.pruned) for m in self.pruned[pair]]
        st.track_graph = TrackGraph.from_matches(all_inliers)
        st.log(f"tracks n={len(st.track_graph)}")

    def _gate(self, anchor, image):
        key = (anchor, image)
        if key not in self._gate_cache:
            ms = self.pair_matches(anchor, image)
            k = len(self._gate_cache)
            try:
                res = homography_gate(ms, self._ransac(self.options.homography_threshold, 100000 + k),
                                      self.images[anchor].width)
            except TooFewMatches:
                res = None
            self._gate_cache[key] = res
        return self._gate_cache[key]

    def propagate_by_homography(self) -> list:
        st = self.state
        added = []
        for image in sorted(st.unregistered):
            for anchor in st.anchors:
                gate = self._gate(anchor, image)
                if gate is None or not gate.passes:
                    continue
                ann = st.annotations[anchor]
                moved = apply_homography(gate.H, ann.pixels)
                intr = self.intrinsics_for(image)
                keep = intr.in_bounds(moved)
                n = int(keep.sum())
                if n < 4:
                    st.log(f"homography {anchor} {image} pass transferred={n} not_registered")
                    continue
                corr = [Correspondence2D3D(tuple(p), tuple(X)) for p, X in zip(moved[keep], ann.points[keep])]
                try:
                    pose = solve_pnp(corr, intr, st.registered[anchor].pose)
                except NumericalError as exc:
                    st.log(f"homography {anchor} {image} pass transferred={n} pnp_failed={type(exc).__name__}")
                    continue
                st.registered[image] = Camera(intr, pose)
                st.unregistered.discard(image)
                added.append(image)
                st.log(f"homography {anchor} {image} pass inliers={_f(gate.inlier_fraction)} transferred={n}")
                break
        return added

    def track_counts(self):
        """Per unregistered image: tracks with a 3D point observing it."""
        st = self.state
        by_image = st.track_graph.by_image()
        counts = {}
        for image in st.unregistered:
            counts[image] = sum(1 for t in by_image.get(image, []) if st.track_graph.tracks[t].point is not None)
        return counts

    def select_next_image(self):
        st = self.state
        if not st.unregistered:
            raise EmptyUnregisteredSet("every image is registered")
        counts = self.track_counts()
        thr = self.options.track_threshold
        candidates = [(n, img) for img, n in counts.items() if n >= thr]
        if candidates:
            n, img = min(candidates)
            return img, Strategy.TRACK_PNP
        raw = {img: sum(len(self.pair_matches(img, r)) for r in st.registered) for img in st.unregistered}
        img = min(st.unregistered, key=lambda i: (counts[i], raw[i], i))
        return img, Strategy.NEEDS_ANCHOR

    def _initial_pose(self, image):
        """Pose of the registered image sharing the most tracks with ``image``."""
        st = self.state
        best, best_n = None, -1
        mine = set(st.track_graph.by_image().get(image, []))
        for r in sorted(st.registered):
            n = len(mine & set(st.track_graph.by_image().get(r, [])))
            if n > best_n:
                best, best_n = r, n
        return st.registered[best].pose

    def register_by_tracks(self, image):
        st = self.state
        graph = st.track_graph
        intr = self.intrinsics_for(image)
        ids = [t for t in graph.by_image().get(image, []) if graph.tracks[t].point is not None]
        corr = [Correspondence2D3D(graph.tracks[t].observations[image], tuple(graph.tracks[t].point)) for t in ids]
        init = Camera(intr, self._initial_pose(image))
        self._step += 1
        res = pnp_ransac(corr, init, self._ransac(self.options.pnp_threshold, 200000 + self._step))
        inliers = [corr[i] for i in res.inliers]
        lines = []
        for anchor in st.anchors:
            F = self.pair_fundamental(anchor, image)
            if F is None:
                continue
            ann = st.annotations[anchor]
            for px, X in zip(ann.pixels, ann.points):
                try:
                    line = EpipolarLine.from_vector(F @ np.array([px[0], px[1], 1.0]))
                except NumericalError:
                    continue
                lines.append(Correspondence2D3D(None, tuple(X), line))
        pose = res.pose
        how = "ransac"
        if lines:
            try:
                pose = solve_pnp_constrained(lines, intr, res.pose, reprojection_only=inliers,
                                             reprojection_weight=self.options.reprojection_weight,
                                             line_weight=self.options.line_weight)
                how = "constrained"
            except NumericalError as exc:
                st.log(f"warning {image} constrained pnp failed ({type(exc).__name__}); keeping ransac pose")
        else:
            st.log(f"warning {image} no anchor fundamental matrix; plain pnp")
            pose = solve_pnp(inliers, intr, res.pose)
            how = "plain"
        st.registered[image] = Camera(intr, pose)
        st.unregistered.discard(image)
        st.log(f"register_tracks {image} inliers={len(res.inliers)}/{len(corr)} lines={len(lines)} pose={how}")

    def register_next(self, image, strategy: Strategy):
        st = self.state
        if strategy == Strategy.TRACK_PNP:
            self.register_by_tracks(image)
        else:
            anchor_points = np.vstack([a.points for a in st.annotations.values()]) if st.annotations \
                else np.zeros((0, 3))
            ann = self.provider.request(image, anchor_points)
            if ann is None:
                st.log(f"provider_declined {image}")
                raise ProviderDeclined(image, st)
            self.register_anchor(image, ann)
        self.update_structure()
        self.adjust()

    # -- structure -------------------------------------------------------------

    def update_structure(self):
        """Triangulate tracks with two registered views; lift anchor-only tracks onto the mesh."""
        st = self.state
        tri = lifted = 0
        for track in st.track_graph.tracks:
            views = [i for i in track.observations if i in st.registered]
            track.anchor_seen = any(a in track.observations for a in st.anchors)
            if len(views) >= 2 and track.source != "triangulated":
                try:
                    obs = [(st.registered[i], track.observations[i]) for i in sorted(views)]
                    track.point = triangulate(obs, self.options.min_angle_deg)
                    track.source = "triangulated"
                    tri += 1
                    continue
                except NumericalError:
                    pass
            if track.point is None and self.mesh is not None:
                anchor = next((a for a in st.anchors if a in track.observations), None)
                if anchor is None:
                    continue
                hit = intersect_ray_mesh(self.mesh, pixel_ray(st.registered[anchor], track.observations[anchor]))
                if hit is not None:
                    track.point = hit.point
                    track.source = "mesh"
                    lifted += 1
        st.track_graph.invalidate()
        st.log(f"structure triangulated={tri} lifted={lifted}")

    def _filter_outliers(self):
        st = self.state
        graph = st.track_graph
        removed = 0
        for ti, track in enumerate(graph.tracks):
            if track.source != "triangulated":
                continue
            for img in sorted(track.observations):
                if img not in st.registered:
                    continue
                cam = st.registered[img]
                err = reprojection_errors(cam, np.array([track.observations[img]]), track.point[None])[0]
                if err > OUTLIER_FRACTION_OF_WIDTH * cam.width:
                    graph.remove_observation(ti, img)
                    removed += 1
                    if track.point is None:
                        break
            if track.point is not None and sum(i in st.registered for i in track.observations) < 2:
                track.point = None
                track.source = None
        graph.invalidate()
        return removed

    def adjust(self):
        st = self.state
        pre_removed = self._filter_outliers()
        tracks = [t for t in st.track_graph.tracks if t.source == "triangulated"]
        if not tracks:
            st.log("bundle skipped no_triangulated_tracks")
            return None
        counts = {i: 0 for i in st.registered}
        for t in tracks:
            for i in t.observations:
                if i in counts:
                    counts[i] += 1
        fixed = [i for i in sorted(counts) if counts[i] < 6 and i not in st.anchors]
        problem = BundleProblem(dict(st.registered), tracks, list(st.anchors), self.options.mode,
                                anchor_weight=self.options.anchor_weight, fixed_ids=fixed,
                                refine_intrinsics=len(st.registered) >= self.options.intrinsics_min_cameras)
        try:
            res = bundle_adjust(problem, self.options.bundle_options)
        except UnderConstrained as exc:
            st.log(f"bundle skipped {exc}")
            return None
        st.registered.update(res.cameras)
        for t, X in zip(tracks, res.points):
            if X is not None:
                t.point = np.asarray(X)
        for ti, anchor in res.dropped_ray_constraints:
            st.log(f"warning bundle track behind anchor {anchor}; ray constraint dropped")
        removed = pre_removed + self._filter_outliers()
        rep = res.report
        st.log(f"bundle mode={self.options.mode.value} cameras={len(st.registered)} tracks={len(tracks)} "
               f"fixed={len(fixed)} iterations={rep.iterations} cost={rep.initial_cost:.6e}->{rep.final_cost:.6e} "
               f"outliers_removed={removed}")
        return res

    # -- driver ----------------------------------------------------------------

    def run(self, annotations: dict) -> RegistrationState:
        st = self.state
        if not annotations:
            raise TooFewCorrespondences("at least one anchor annotation is required")
        for image_id in sorted(annotations):
            if image_id in self.images:
                self.register_anchor(image_id, annotations[image_id])
        self.prune_all_pairs()
        self.propagate_by_homography()
        self.update_structure()
        self.adjust()
        while st.unregistered:
            image, strategy = self.select_next_image()
            st.log(f"select {image} {strategy.value}")
            self.register_next(image, strategy)
            st.check()
        st.log(f"done registered={len(st.registered)} anchors={len(st.anchors)}")
        return st


def run_pipeline(images: dict, matches, annotations: dict, mesh: Optional[TriangleMesh],
                 provider: Optional[CorrespondenceProvider] = None,
                 options: Optional[PipelineOptions] = None) -> RegistrationState:
    """Register every image or stop with ProviderDeclined; returns the final state."""
    return Registrar(images, matches, mesh, provider, options).run(annotations)


def images_from_cameras(cameras: dict) -> dict:
    return {i: ImageInfo(i, c.intrinsics.width, c.intrinsics.height, c.intrinsics.focal_px)
            for i, c in cameras.items()}

