"""Rigid transforms, quaternion algebra and inter-frame point transfer.

Frame conventions
-----------------
Sensor frames (LIDAR ``L_k``) follow the ground-plane convention used by the
segmentation code: ``x`` forward, ``y`` vertical pointing *down* (so the ground
sits at ``y = +h`` below a sensor mounted ``h`` metres high) and ``z`` to the
left.  This is right-handed.

The 3D world frame is the same axis layout anchored on the ground at the map
origin: world ``x`` is map ``x``, world ``z`` is map ``y`` and world ``y`` is
minus "up".  :func:`pose_from_planar` / :func:`planar_from_pose` convert between
the 2D map pose ``(x, y, yaw)`` used by planning/control and 3D transforms.

A :class:`PoseTransform` ``T_k`` maps coordinates expressed in frame ``L_k``
into the world frame: ``X_world = R_k @ X + t_k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

UNIT_TOL = 1e-6


def _as_unit_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    if not np.all(np.isfinite(q)):
        raise InvalidInputError(f"non-finite quaternion {q}")
    n = math.sqrt(float(q @ q))
    if abs(n - 1.0) > UNIT_TOL:
        raise InvalidInputError(f"quaternion norm {n:.9g} is not within {UNIT_TOL} of 1")
    return q / n


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as ``(x, y, z, w)``."""
    x, y, z, w = _as_unit_quat(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotation` (Shepperd's method), returns ``(x, y, z, w)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` for ``(x, y, z, w)`` quaternions."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_from_rotvec(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        q = np.array([0.5 * v[0], 0.5 * v[1], 0.5 * v[2], 1.0])
        return q / np.linalg.norm(q)
    axis = v / angle
    s = math.sin(0.5 * angle)
    return np.array([axis[0] * s, axis[1] * s, axis[2] * s, math.cos(0.5 * angle)])


def quat_slerp(q0, q1, alpha: float) -> np.ndarray:
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    if alpha <= 0.0:
        return q0.copy()
    if alpha >= 1.0:
        return q1.copy()
    d = float(q0 @ q1)
    if d < 0.0:
        q1 = -q1
        d = -d
    if d > 0.9995:
        q = q0 + alpha * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = math.acos(min(d, 1.0))
    s = math.sin(theta)
    q = (math.sin((1 - alpha) * theta) * q0 + math.sin(alpha * theta) * q1) / s
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class PoseTransform:
    """Translation plus unit quaternion; maps its own frame into the parent frame."""

    t_x: float = 0.0
    t_y: float = 0.0
    t_z: float = 0.0
    q_x: float = 0.0
    q_y: float = 0.0
    q_z: float = 0.0
    q_w: float = 1.0

    def __post_init__(self):
        vals = (self.t_x, self.t_y, self.t_z, self.q_x, self.q_y, self.q_z, self.q_w)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError("pose components must be finite")
        q = _as_unit_quat((self.q_x, self.q_y, self.q_z, self.q_w))
        # renormalize silently inside tolerance
        for name, v in zip(("q_x", "q_y", "q_z", "q_w"), q):
            object.__setattr__(self, name, float(v))

    @classmethod
    def identity(cls) -> "PoseTransform":
        return cls()

    @classmethod
    def from_arrays(cls, t, q) -> "PoseTransform":
        t = np.asarray(t, dtype=float).reshape(3)
        q = np.asarray(q, dtype=float).reshape(4)
        return cls(float(t[0]), float(t[1]), float(t[2]), float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @classmethod
    def from_matrix(cls, R, t) -> "PoseTransform":
        return cls.from_arrays(t, rotation_to_quat(R))

    @classmethod
    def from_vector(cls, v) -> "PoseTransform":
        """Build from the 7-vector ``[t_x, t_y, t_z, x, y, z, w]``."""
        v = np.asarray(v, dtype=float).reshape(7)
        return cls.from_arrays(v[:3], v[3:])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.t_x, self.t_y, self.t_z])

    @property
    def quaternion(self) -> np.ndarray:
        return np.array([self.q_x, self.q_y, self.q_z, self.q_w])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.quaternion)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.quaternion])

    def apply(self, points) -> np.ndarray:
        """Map points (``(3,)`` or ``(n, 3)``) from this frame into the parent frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "PoseTransform":
        R = self.rotation
        q = self.quaternion
        return PoseTransform.from_arrays(-R.T @ self.translation, [-q[0], -q[1], -q[2], q[3]])


def compose(T_a: PoseTransform, T_b: PoseTransform) -> PoseTransform:
    """``T_a ∘ T_b``: apply ``T_b`` first, then ``T_a``."""
    q = quat_multiply(T_a.quaternion, T_b.quaternion)
    q /= np.linalg.norm(q)
    t = T_a.rotation @ T_b.translation + T_a.translation
    return PoseTransform.from_arrays(t, q)


def inverse(T: PoseTransform) -> PoseTransform:
    return T.inverse()


def transfer_point(X, T_k: PoseTransform, T_hat: PoseTransform) -> np.ndarray:
    """Express points given in frame ``L_k`` in frame ``L_hat``.

    Both transforms map their frame into the shared initial (world) frame, so
    ``X_hat = R_hat^-1 (R_k X + t_k - t_hat)``.  Works on ``(3,)`` or ``(n, 3)``.
    """
    X = np.asarray(X, dtype=float)
    world = X @ T_k.rotation.T + T_k.translation
    return (world - T_hat.translation) @ T_hat.rotation


def pose_from_planar(x: float, y: float, yaw: float, height: float = 0.0) -> PoseTransform:
    """Sensor pose (sensor → world) for a planar vehicle pose with the sensor ``height`` m above ground."""
    half = -0.5 * yaw
    return PoseTransform(float(x), -float(height), float(y), 0.0, math.sin(half), 0.0, math.cos(half))


def planar_from_pose(T: PoseTransform) -> tuple[float, float, float]:
    """Project a sensor pose back to ``(x, y, yaw)`` on the map."""
    R = T.rotation
    return T.t_x, T.t_z, math.atan2(R[2, 0], R[0, 0])


def sensor_to_map(points, x: float, y: float, yaw: float) -> np.ndarray:
    """Map ``(n, 3)`` sensor-frame points to 2D map coordinates (drops the vertical axis)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    c, s = math.cos(yaw), math.sin(yaw)
    mx = x + p[:, 0] * c - p[:, 2] * s
    my = y + p[:, 0] * s + p[:, 2] * c
    return np.column_stack([mx, my])


def map_to_sensor2d(points, x: float, y: float, yaw: float) -> np.ndarray:
    """Inverse of :func:`sensor_to_map` for 2D points: returns ``(forward, left)`` coordinates."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    dx = p[:, 0] - x
    dy = p[:, 1] - y
    c, s = math.cos(yaw), math.sin(yaw)
    return np.column_stack([dx * c + dy * s, -dx * s + dy * c])


def wrap_angle(a):
    """Wrap to ``(-pi, pi]``."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w
