"""Euclidean clustering of obstacle points and cone-size filtering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidInputError


@dataclass(frozen=True)
class Cluster:
    indices: np.ndarray
    centroid: np.ndarray
    extents: np.ndarray  # (dx, dy, dz) in the input frame

    @property
    def size(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class ConeCandidate:
    position: np.ndarray  # sensor frame, projected onto the ground plane
    extent: float
    point_count: int
    height: float = 0.0


@dataclass(frozen=True)
class DetectionConfig:
    radius: float = 0.4
    min_points: int = 2
    min_extent: float = 0.1
    max_extent: float = 0.5
    max_height: float = 0.5
    max_points: int = 2000


def euclidean_cluster(points, radius: float, min_points: int = 1) -> list[Cluster]:
    """Group points whose ``<= radius`` neighbourhood graph connects them.

    Clusters smaller than ``min_points`` are dropped.  Output order follows the
    first member index of each cluster.
    """
    if radius <= 0:
        raise InvalidInputError("radius must be positive")
    if min_points < 1:
        raise InvalidInputError("min_points must be >= 1")
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    if pts.shape[0] == 0:
        return []
    labels = _kernels.grid_cluster(pts, float(radius))
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    out = []
    for members in np.split(order, bounds):
        if members.size < min_points:
            continue
        sub = pts[members]
        out.append(Cluster(members, sub.mean(axis=0), sub.max(axis=0) - sub.min(axis=0)))
    return out


def filter_cone_sized(
    clusters,
    min_extent: float = 0.1,
    max_extent: float = 0.5,
    max_points: int = 2000,
    *,
    max_height: float = 0.5,
    ground=None,
) -> list[ConeCandidate]:
    """Keep clusters whose horizontal footprint and height fit a traffic cone.

    Extents are read in the sensor frame (``x``/``z`` horizontal, ``y`` vertical).
    The candidate position is the centroid dropped onto ``ground`` (a
    :class:`~racestack.ground.PlaneModel`), or onto ``y = 0`` when no plane is given.
    """
    if not min_extent < max_extent:
        raise InvalidInputError("min_extent must be < max_extent")
    out = []
    for c in clusters:
        horiz = float(max(c.extents[0], c.extents[2]))
        height = float(c.extents[1])
        if horiz < min_extent or horiz > max_extent or height > max_height:
            continue
        if c.size > max_points:
            continue
        cx, cz = float(c.centroid[0]), float(c.centroid[2])
        gy = ground.a * cx + ground.b * cz + ground.h if ground is not None else 0.0
        pos = np.array([cx, gy, cz])
        out.append(ConeCandidate(pos, horiz, c.size, height))
    return out


def detect_cones(obstacle_points, cfg: DetectionConfig, ground=None) -> list[ConeCandidate]:
    clusters = euclidean_cluster(obstacle_points, cfg.radius, cfg.min_points)
    return filter_cone_sized(
        clusters, cfg.min_extent, cfg.max_extent, cfg.max_points, max_height=cfg.max_height, ground=ground
    )
