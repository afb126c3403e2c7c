"""RANSAC ground-plane segmentation.

The ground is modelled in the sensor frame as ``y = a*x + b*z + h`` with ``y``
pointing down, so ``h`` is the sensor height above a level track.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InsufficientDataError, InvalidInputError

SLOPE_MAX = 1.0


@dataclass(frozen=True)
class PlaneModel:
    a: float
    b: float
    h: float

    def __post_init__(self):
        if not (abs(self.a) < SLOPE_MAX and abs(self.b) < SLOPE_MAX):
            raise InvalidInputError(f"plane slopes ({self.a}, {self.b}) exceed the near-flat bound")


@dataclass(frozen=True)
class RoiBox:
    """Forward box in the sensor frame: ``x`` ahead, ``z`` lateral."""

    x_min: float = 0.0
    x_max: float = 20.0
    z_min: float = -6.0
    z_max: float = 6.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.z_min < self.z_max):
            raise InvalidInputError("RoiBox needs min < max on both axes")

    def mask(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return (
            (p[:, 0] >= self.x_min)
            & (p[:, 0] <= self.x_max)
            & (p[:, 2] >= self.z_min)
            & (p[:, 2] <= self.z_max)
        )


@dataclass(frozen=True)
class GroundConfig:
    tau: float = 0.05
    max_iter: int = 100
    roi: RoiBox = field(default_factory=RoiBox)
    h_min: float = 0.0
    h_max: float = 3.0
    offset_in_denominator: bool = False


@dataclass
class SegmentationResult:
    ground_indices: np.ndarray
    obstacle_indices: np.ndarray
    model: PlaneModel
    inlier_count: int
    hypothesis_counts: np.ndarray  # per sampled hypothesis, -1 when skipped


def plane_error(p, m: PlaneModel, offset_in_denominator: bool = False):
    """Signed point-to-plane distance (positive below the plane, since ``y`` points down).

    With ``offset_in_denominator`` the denominator also carries ``h**2``.  That
    variant is not a true distance and is off by default.
    """
    p = np.asarray(p, dtype=float)
    num = p[..., 1] - m.a * p[..., 0] - m.b * p[..., 2] - m.h
    if offset_in_denominator:
        den = math.sqrt(1.0 + m.a**2 + m.b**2 + m.h**2)
    else:
        den = math.sqrt(1.0 + m.a**2 + m.b**2)
    e = num / den
    return float(e) if np.ndim(e) == 0 else e


def classify_inlier(p, m: PlaneModel, tau: float, offset_in_denominator: bool = False):
    if tau <= 0:
        raise InvalidInputError("tau must be positive")
    r = np.abs(plane_error(p, m, offset_in_denominator)) < tau
    return bool(r) if np.ndim(r) == 0 else r


def ransac_fit(
    cloud,
    roi: RoiBox | None = None,
    tau: float = 0.05,
    max_iter: int = 100,
    seed: int = 0,
    *,
    h_bounds: tuple[float, float] = (0.0, 3.0),
    offset_in_denominator: bool = False,
) -> SegmentationResult:
    """Fit the ground plane to the ROI part of ``cloud`` and split it into ground / obstacles.

    Hypotheses come from three distinct ROI points drawn with a seeded
    generator.  Collinear samples and planes outside the slope/height bounds are
    skipped.  The first hypothesis reaching the maximum inlier count wins.
    Returned indices refer to rows of ``cloud``.
    """
    if max_iter < 1:
        raise InvalidInputError("max_iter must be >= 1")
    if tau <= 0:
        raise InvalidInputError("tau must be positive")
    roi = roi or RoiBox()
    pts = np.ascontiguousarray(np.asarray(cloud, dtype=np.float64).reshape(-1, 3))
    roi_idx = np.flatnonzero(roi.mask(pts))
    if roi_idx.size < 3:
        raise InsufficientDataError(f"{roi_idx.size} points inside the ROI, need at least 3")
    sub = np.ascontiguousarray(pts[roi_idx])

    rng = np.random.default_rng(seed)
    samples = np.empty((max_iter, 3), dtype=np.int64)
    for i in range(max_iter):
        samples[i] = rng.choice(sub.shape[0], size=3, replace=False)

    models, counts = _kernels.ransac_hypotheses(
        sub, samples, float(tau), bool(offset_in_denominator), SLOPE_MAX, float(h_bounds[0]), float(h_bounds[1])
    )
    if counts.max() < 0:
        raise InsufficientDataError("every sampled hypothesis was degenerate or out of bounds")
    best = int(np.argmax(counts))  # argmax returns the first maximum
    model = PlaneModel(*(float(v) for v in models[best]))
    inl = classify_inlier(sub, model, tau, offset_in_denominator)
    refined = _refit(sub[inl])
    if refined is not None:
        inl_r = classify_inlier(sub, refined, tau, offset_in_denominator)
        # keep the least-squares polish only if it does not lose inliers
        if inl_r.sum() >= inl.sum():
            model, inl = refined, inl_r
    return SegmentationResult(
        ground_indices=roi_idx[inl],
        obstacle_indices=roi_idx[~inl],
        model=model,
        inlier_count=int(inl.sum()),
        hypothesis_counts=counts,
    )


def _refit(points: np.ndarray) -> PlaneModel | None:
    if points.shape[0] < 3:
        return None
    A = np.column_stack([points[:, 0], points[:, 2], np.ones(points.shape[0])])
    sol, _, rank, _ = np.linalg.lstsq(A, points[:, 1], rcond=None)
    if rank < 3 or abs(sol[0]) >= SLOPE_MAX or abs(sol[1]) >= SLOPE_MAX:
        return None
    return PlaneModel(float(sol[0]), float(sol[1]), float(sol[2]))


def segment(cloud, cfg: GroundConfig, seed: int = 0) -> SegmentationResult:
    return ransac_fit(
        cloud,
        cfg.roi,
        cfg.tau,
        cfg.max_iter,
        seed,
        h_bounds=(cfg.h_min, cfg.h_max),
        offset_in_denominator=cfg.offset_in_denominator,
    )
