"""Camera-side cone verification: ground-plane homography, HOG + linear SVM, hue clustering."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, InvalidDatasetError, InvalidInputError, PointAtInfinityError


class ConeColor(enum.Enum):
    RED = "red"
    BLUE = "blue"
    YELLOW = "yellow"
    UNKNOWN = "unknown"


REFERENCE_HUES = {ConeColor.RED: 0.0, ConeColor.YELLOW: 60.0, ConeColor.BLUE: 240.0}
HUE_TOLERANCE = 40.0
MIN_CONE_SATURATION = 0.25


# -- perspective ----------------------------------------------------------------


@dataclass(frozen=True)
class PerspectiveMatrix:
    """Row-vector homography: ``[x', y', w'] = [x, y, 1] @ M`` with ``M[2, 2] == 1``."""

    M: np.ndarray

    def __post_init__(self):
        M = np.array(self.M, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(M)):
            raise InvalidInputError("perspective matrix must be finite")
        if M[2, 2] == 0.0:
            raise DegenerateError("cannot normalise a matrix with a33 = 0")
        M = M / M[2, 2]
        if abs(np.linalg.det(M)) <= 1e-12:
            raise DegenerateError("perspective matrix is singular")
        M.setflags(write=False)
        object.__setattr__(self, "M", M)

    @classmethod
    def identity(cls) -> "PerspectiveMatrix":
        return cls(np.eye(3))

    def inverse(self) -> "PerspectiveMatrix":
        return PerspectiveMatrix(np.linalg.inv(self.M))


def _area2(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _check_general_position(pts: np.ndarray, what: str):
    scale = max(1.0, float(np.abs(pts).max()))
    for i in range(4):
        a, b, c = (pts[j] for j in range(4) if j != i)
        if abs(_area2(a, b, c)) <= 1e-12 * scale * scale:
            raise DegenerateError(f"three {what} points are collinear or coincide")


def solve_perspective(pairs) -> PerspectiveMatrix:
    """Homography from four ``(source, target)`` point pairs."""
    pairs = list(pairs)
    if len(pairs) != 4:
        raise InvalidInputError("exactly four point pairs are required")
    src = np.array([p[0] for p in pairs], dtype=float).reshape(4, 2)
    dst = np.array([p[1] for p in pairs], dtype=float).reshape(4, 2)
    _check_general_position(src, "source")
    _check_general_position(dst, "target")
    # unknowns: m00 m10 m20 m01 m11 m21 m02 m12   (m22 = 1)
    A = np.zeros((8, 8))
    rhs = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        rhs[2 * k] = u
        A[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * k + 1] = v
    try:
        m = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateError("point configuration admits no unique homography") from exc
    M = np.array([[m[0], m[3], m[6]], [m[1], m[4], m[7]], [m[2], m[5], 1.0]])
    return PerspectiveMatrix(M)


def project(p, M: PerspectiveMatrix) -> np.ndarray:
    x, y = float(p[0]), float(p[1])
    h = np.array([x, y, 1.0]) @ M.M
    if abs(h[2]) < 1e-12:
        raise PointAtInfinityError(f"point ({x}, {y}) maps to infinity")
    return np.array([h[0] / h[2], h[1] / h[2]])


def roi_rectangle(ground_xy, M: PerspectiveMatrix, half_size: float = 0.25):
    """Image rectangle ``(u0, v0, u1, v1)`` covering a square ground window around a cone."""
    gx, gy = float(ground_xy[0]), float(ground_xy[1])
    corners = [project((gx + dx, gy + dy), M) for dx in (-half_size, half_size) for dy in (-half_size, half_size)]
    c = np.array(corners)
    return float(c[:, 0].min()), float(c[:, 1].min()), float(c[:, 0].max()), float(c[:, 1].max())


# -- patches ------------------------------------------------------------------------


@dataclass(frozen=True)
class ImagePatch:
    """``gray``: ``(h, w)`` intensities; ``hsv``: ``(h, w, 3)`` with hue in degrees, S and V in [0, 1]."""

    data: np.ndarray
    mode: str = "gray"

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if self.mode not in ("gray", "hsv"):
            raise InvalidInputError(f"unknown channel mode {self.mode!r}")
        if self.mode == "gray" and d.ndim != 2:
            raise InvalidInputError("gray patch must be 2-D")
        if self.mode == "hsv":
            if d.ndim != 3 or d.shape[2] != 3:
                raise InvalidInputError("hsv patch must be (h, w, 3)")
            d[..., 0] = np.mod(d[..., 0], 360.0)
            if np.any(d[..., 1:] < 0.0) or np.any(d[..., 1:] > 1.0):
                raise InvalidInputError("saturation and value must lie in [0, 1]")
        if d.shape[0] == 0 or d.shape[1] == 0:
            raise InvalidInputError("patch dimensions must be positive")
        if not np.all(np.isfinite(d)):
            raise InvalidInputError("patch contains non-finite pixels")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape[:2]

    def gray(self) -> "ImagePatch":
        if self.mode == "gray":
            return self
        return ImagePatch(self.data[..., 2], "gray")


# -- HOG --------------------------------------------------------------------------------


@dataclass(frozen=True)
class HogGeometry:
    cell: int = 8
    bins: int = 9
    block: int = 2
    patch: int = 64

    def descriptor_length(self, height: int | None = None, width: int | None = None) -> int:
        cy = (height or self.patch) // self.cell
        cx = (width or self.patch) // self.cell
        return max(cy - self.block + 1, 0) * max(cx - self.block + 1, 0) * self.block * self.block * self.bins


def hog_features(patch, geometry: HogGeometry | None = None) -> np.ndarray:
    """Unsigned-gradient HOG: per-cell orientation histograms, L2-normalised over overlapping blocks.

    Bin ``k`` is centred on ``k * 180 / bins`` degrees and votes are split
    linearly between the two nearest centres, so a purely horizontal gradient
    lands entirely in bin 0.
    """
    g = geometry or HogGeometry()
    img = patch.gray().data if isinstance(patch, ImagePatch) else np.asarray(patch, dtype=float)
    if img.ndim != 2:
        raise InvalidInputError("hog_features needs a single-channel patch")
    h, w = img.shape
    if h % g.cell or w % g.cell or h < g.cell * g.block or w < g.cell * g.block:
        raise InvalidInputError(f"patch {h}x{w} does not tile into {g.cell}-pixel cells and {g.block}-cell blocks")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = img[:, 2:] - img[:, :-2]
    gy[1:-1, :] = img[2:, :] - img[:-2, :]
    mag = np.hypot(gx, gy)
    ang = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    width = 180.0 / g.bins
    pos = ang / width
    lo = np.floor(pos).astype(int) % g.bins
    frac = pos - np.floor(pos)
    hi = (lo + 1) % g.bins
    cy, cx = h // g.cell, w // g.cell
    cell_idx = (np.arange(h) // g.cell)[:, None] * cx + (np.arange(w) // g.cell)[None, :]
    hist = np.zeros(cy * cx * g.bins)
    np.add.at(hist, (cell_idx * g.bins + lo).ravel(), (mag * (1.0 - frac)).ravel())
    np.add.at(hist, (cell_idx * g.bins + hi).ravel(), (mag * frac).ravel())
    hist = hist.reshape(cy, cx, g.bins)
    blocks = []
    eps2 = 1e-6
    for by in range(cy - g.block + 1):
        for bx in range(cx - g.block + 1):
            v = hist[by:by + g.block, bx:bx + g.block].ravel()
            blocks.append(v / math.sqrt(float(v @ v) + eps2))
    return np.concatenate(blocks)


# -- linear SVM -----------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearSvmModel:
    w: np.ndarray
    b: float
    train_accuracy: float = float("nan")
    losses: tuple = ()
    geometry: HogGeometry = field(default_factory=HogGeometry)

    def __post_init__(self):
        w = np.array(self.w, dtype=float).ravel()
        if not np.all(np.isfinite(w)) or not math.isfinite(self.b):
            raise InvalidInputError("SVM weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


def _svm_loss(w, b, X, y, lam) -> float:
    margins = y * (X @ w + b)
    return 0.5 * lam * float(w @ w) + float(np.maximum(0.0, 1.0 - margins).mean())


def svm_train(positives, negatives, epochs: int = 60, rate: float = 0.5, regularization: float = 1e-3,
              seed: int = 0, batch: int = 64) -> LinearSvmModel:
    """Regularised hinge-loss linear SVM by seeded mini-batch subgradient descent.

    After every epoch the full objective is evaluated; an epoch that would
    increase it is discarded and the step size halved, so the recorded loss
    sequence never increases.
    """
    P = np.atleast_2d(np.asarray(positives, dtype=float))
    N = np.atleast_2d(np.asarray(negatives, dtype=float))
    if P.size == 0 or N.size == 0 or P.shape[0] == 0 or N.shape[0] == 0:
        raise InvalidDatasetError("both classes need at least one example")
    if P.shape[1] != N.shape[1]:
        raise InvalidDatasetError("descriptor lengths differ between classes")
    X = np.vstack([P, N])
    y = np.concatenate([np.ones(len(P)), -np.ones(len(N))])
    rng = np.random.default_rng(seed)
    w = np.zeros(X.shape[1])
    b = 0.0
    loss = _svm_loss(w, b, X, y, regularization)
    losses = [loss]
    eta = rate
    for _ in range(epochs):
        w_try, b_try = w.copy(), b
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch):
            idx = order[start:start + batch]
            Xb, yb = X[idx], y[idx]
            active = yb * (Xb @ w_try + b_try) < 1.0
            gw = regularization * w_try - (yb[active, None] * Xb[active]).sum(axis=0) / len(idx)
            gb = -yb[active].sum() / len(idx)
            w_try -= eta * gw
            b_try -= eta * gb
        new = _svm_loss(w_try, b_try, X, y, regularization)
        if new <= loss:
            w, b, loss = w_try, b_try, new
        else:
            eta *= 0.5
        losses.append(loss)
    acc = float(np.mean(np.where(X @ w + b > 0.0, 1.0, -1.0) == y))
    return LinearSvmModel(w, float(b), acc, tuple(losses))


def svm_predict(model: LinearSvmModel, descriptor) -> tuple[bool, float]:
    """``(w . x + b > 0, w . x + b)``; a zero margin counts as negative."""
    x = np.asarray(descriptor, dtype=float).ravel()
    if x.shape[0] != model.w.shape[0]:
        raise InvalidInputError(f"descriptor length {x.shape[0]} != model length {model.w.shape[0]}")
    m = float(model.w @ x + model.b)
    return m > 0.0, m


# -- colour -----------------------------------------------------------------------------------


def _circ_diff(a, b):
    d = np.mod(np.asarray(a) - np.asarray(b) + 180.0, 360.0) - 180.0
    return d


def circular_mean(hues) -> float:
    r = np.radians(np.asarray(hues, dtype=float))
    return float(np.mod(np.degrees(math.atan2(np.sin(r).sum(), np.cos(r).sum())), 360.0))


def kmeans_hue(hues, seed: int = 0, iterations: int = 50):
    """Two-cluster k-means on the hue circle; returns ``(labels, centres)``.

    Centres start at the smallest and largest hue present; ``seed`` only
    breaks ties among equidistant points.
    """
    h = np.mod(np.asarray(hues, dtype=float).ravel(), 360.0)
    if h.size == 0:
        raise InvalidInputError("no pixels to cluster")
    centres = np.array([h.min(), h.max()])
    rng = np.random.default_rng(seed)
    jitter = rng.random(h.size) * 1e-12
    labels = np.zeros(h.size, dtype=int)
    for _ in range(iterations):
        d0 = np.abs(_circ_diff(h, centres[0]))
        d1 = np.abs(_circ_diff(h, centres[1]))
        new = (d1 + jitter < d0 + 0.5e-12).astype(int)
        new_centres = centres.copy()
        for k in (0, 1):
            if np.any(new == k):
                new_centres[k] = circular_mean(h[new == k])
        if np.array_equal(new, labels) and np.allclose(new_centres, centres):
            break
        labels, centres = new, new_centres
    return labels, centres


def hue_to_color(hue: float, tolerance: float = HUE_TOLERANCE) -> ConeColor:
    best, dist = ConeColor.UNKNOWN, math.inf
    for color, ref in REFERENCE_HUES.items():
        d = abs(float(_circ_diff(hue, ref)))
        if d < dist:
            best, dist = color, d
    return best if dist <= tolerance else ConeColor.UNKNOWN


def classify_color(patch: ImagePatch, seed: int = 0) -> ConeColor:
    """Cone colour from hue clustering: the more saturated of two hue clusters is the cone."""
    if not isinstance(patch, ImagePatch) or patch.mode != "hsv":
        raise InvalidInputError("classify_color needs an HSV ImagePatch")
    hue = patch.data[..., 0].ravel()
    sat = patch.data[..., 1].ravel()
    labels, centres = kmeans_hue(hue, seed)
    sat_means = [sat[labels == k].mean() if np.any(labels == k) else -1.0 for k in (0, 1)]
    k = int(np.argmax(sat_means))
    if sat_means[k] < MIN_CONE_SATURATION:
        return ConeColor.UNKNOWN
    return hue_to_color(centres[k])
