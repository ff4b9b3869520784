"""Weak-perspective camera: uniform scale + 2D translation + unit quaternion.

Projection rotates points by the quaternion, drops z, scales and translates.
The rotated z is kept separately as the depth used for occlusion ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


def _as_f64(x):
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass
class Camera:
    scale: torch.Tensor        # () > 0
    translation: torch.Tensor  # (2,)
    quaternion: torch.Tensor   # (4,) wxyz, unit

    def __post_init__(self):
        self.scale = _as_f64(self.scale)
        self.translation = _as_f64(self.translation)
        self.quaternion = _as_f64(self.quaternion)

    @staticmethod
    def identity() -> "Camera":
        return Camera(1.0, [0.0, 0.0], [1.0, 0.0, 0.0, 0.0])

    def to_dict(self) -> dict:
        return {
            "scale": float(self.scale),
            "trans": [float(t) for t in self.translation],
            "quat": [float(q) for q in self.quaternion],
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(d["scale"], d["trans"], d["quat"])


@dataclass
class CameraHypotheses:
    cameras: list[Camera]
    scores: list[float] = field(default_factory=list)

    def best(self) -> Camera:
        if not self.scores:
            return self.cameras[0]
        return self.cameras[int(np.argmin(self.scores))]


def quat_multiply(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return torch.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_rotate(q: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Rotate (N, 3) points by a unit quaternion (w, x, y, z)."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    R = torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)]),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)]),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]),
    ])
    return points @ R.T


def quat_from_axis_angle(axis, angle_rad: float) -> torch.Tensor:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = angle_rad / 2.0
    return _as_f64(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def project(points: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Weak-perspective projection of (N, 3) points to (N, 2)."""
    rotated = quat_rotate(cam.quaternion, points)
    return cam.scale * rotated[..., :2] + cam.translation


def camera_depths(points: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Rotated z per point; larger means closer to the viewer."""
    return quat_rotate(cam.quaternion, points)[..., 2]


def normalize_rotation(cam: Camera) -> Camera:
    norm = cam.quaternion.norm()
    if float(norm) < 1e-8:
        raise ArithmeticError("quaternion norm too small to normalize")
    return Camera(cam.scale, cam.translation, cam.quaternion / norm)


def init_hypotheses(k: int, seed: int) -> CameraHypotheses:
    """k azimuth-spread cameras (rotation about +y), each jittered by ~5 deg."""
    if k < 1:
        raise ValueError("need at least one hypothesis")
    rng = np.random.default_rng(seed)
    cams = []
    for i in range(k):
        azimuth = 2.0 * np.pi * i / k
        q = quat_from_axis_angle([0.0, 1.0, 0.0], azimuth)
        axis = rng.normal(size=3)
        angle = rng.normal(0.0, np.deg2rad(5.0))
        q = quat_multiply(quat_from_axis_angle(axis, angle), q)
        cams.append(normalize_rotation(Camera(1.0, [0.0, 0.0], q)))
    return CameraHypotheses(cams)
