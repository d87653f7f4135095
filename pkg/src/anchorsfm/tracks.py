"""Feature matches and the multi-image tracks built from them."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np


@dataclass(frozen=True)
class FeatureMatch:
    image_a: str
    image_b: str
    pixel_a: tuple
    pixel_b: tuple

    def __post_init__(self):
        if self.image_a == self.image_b:
            raise ValueError("a match must join two different images")
        if not np.all(np.isfinite(self.pixel_a)) or not np.all(np.isfinite(self.pixel_b)):
            raise ValueError("match pixels must be finite")


def match_arrays(matches) -> tuple[np.ndarray, np.ndarray]:
    if not matches:
        return np.zeros((0, 2)), np.zeros((0, 2))
    pa = np.array([m.pixel_a for m in matches], dtype=float)
    pb = np.array([m.pixel_b for m in matches], dtype=float)
    return pa, pb


@dataclass
class Track:
    """Observations of one physical point, at most one per image."""

    observations: dict = field(default_factory=dict)  # image id -> (u, v)
    point: Optional[np.ndarray] = None
    # "triangulated" when the point came from multi-view intersection,
    # "mesh" when lifted from an anchor ray onto the model
    source: Optional[str] = None
    anchor_seen: bool = False

    def __len__(self):
        return len(self.observations)

    def pixel(self, image_id) -> np.ndarray:
        return np.asarray(self.observations[image_id], dtype=float)

    @property
    def triangulated(self) -> bool:
        return self.point is not None and self.source == "triangulated"


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


class TrackGraph:
    """Tracks plus an image -> track index."""

    def __init__(self, tracks: Iterable[Track] = ()):
        self.tracks: list[Track] = list(tracks)
        self._by_image = None

    @classmethod
    def from_matches(cls, matches: Iterable[FeatureMatch]) -> "TrackGraph":
        """Chain pairwise matches into tracks.

        Features are identified by exact pixel coordinates within an image.
        Components that would put two different pixels in the same image are
        discarded.
        """
        uf = _UnionFind()
        for m in matches:
            a = (m.image_a, float(m.pixel_a[0]), float(m.pixel_a[1]))
            b = (m.image_b, float(m.pixel_b[0]), float(m.pixel_b[1]))
            uf.union(a, b)
        groups = defaultdict(list)
        for node in sorted(uf.parent):
            groups[uf.find(node)].append(node)
        tracks = []
        for root in sorted(groups):
            nodes = groups[root]
            images = [n[0] for n in nodes]
            if len(nodes) < 2 or len(set(images)) != len(images):
                continue
            tracks.append(Track({img: (u, v) for img, u, v in nodes}))
        return cls(tracks)

    def __len__(self):
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks)

    def by_image(self) -> dict:
        if self._by_image is None:
            idx = defaultdict(list)
            for i, t in enumerate(self.tracks):
                for img in t.observations:
                    idx[img].append(i)
            self._by_image = dict(idx)
        return self._by_image

    def invalidate(self):
        self._by_image = None

    def remove_observation(self, track_index: int, image_id: str):
        t = self.tracks[track_index]
        t.observations.pop(image_id, None)
        if len(t.observations) < 2:
            t.point = None
            t.source = None
        self._by_image = None
