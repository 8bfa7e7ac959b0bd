"""Pinhole camera with identity rotation and a free translation."""
from dataclasses import dataclass, replace

import numpy as np

from .errors import BehindCamera, InvariantViolation

DEFAULT_FOCAL = 5000.0
DEFAULT_CROP = 224.0
_MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Camera:
    focal: float = DEFAULT_FOCAL
    principal_point: tuple = (DEFAULT_CROP / 2, DEFAULT_CROP / 2)
    translation: tuple = (0.0, 0.0, 50.0)

    def __post_init__(self):
        if not self.focal > 0:
            raise InvariantViolation(f"focal must be positive, got {self.focal}")
        if not self.translation[2] > 0.05:
            raise InvariantViolation(f"camera translation z must exceed 0.05 m, got {self.translation[2]}")

    @property
    def gamma(self):
        return np.asarray(self.translation, dtype=np.float64)

    def with_translation(self, gamma):
        return replace(self, translation=tuple(float(g) for g in gamma))

    def to_dict(self):
        return {
            "focal": float(self.focal),
            "principal_point": [float(c) for c in self.principal_point],
            "translation": [float(g) for g in self.translation],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            focal=float(d["focal"]),
            principal_point=tuple(float(c) for c in d["principal_point"]),
            translation=tuple(float(g) for g in d["translation"]),
        )


@dataclass(frozen=True)
class WeakPerspective:
    scale: float
    translation: tuple  # (tx, ty) in normalized crop units
    box_center: tuple  # pixels
    box_size: float  # pixels

    def __post_init__(self):
        if not (self.scale > 0 and self.box_size > 0):
            raise InvariantViolation("weak-perspective scale and box size must be positive")


def _camera_space(cam, points):
    p = np.asarray(points, dtype=np.float64) + cam.gamma
    bad = np.flatnonzero(p[..., 2].reshape(-1) <= _MIN_DEPTH)
    if bad.size:
        raise BehindCamera(bad)
    return p


def project(cam, points):
    """``(..., 3)`` points in body coordinates to ``(..., 2)`` pixels."""
    p = _camera_space(cam, points)
    return cam.focal * p[..., :2] / p[..., 2:3] + np.asarray(cam.principal_point)


def project_jacobians(cam, points, dense=False):
    """Jacobians of :func:`project` w.r.t. the points and the translation.

    By default returns per-point blocks, both ``(K, 2, 3)``. With ``dense``
    the point Jacobian is the block-diagonal ``(2K, 3K)`` matrix and the
    translation Jacobian is stacked to ``(2K, 3)``. Translation enters as
    ``p + gamma`` so the blocks coincide.
    """
    p = _camera_space(cam, points)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    f = cam.focal
    J = np.zeros(p.shape[:-1] + (2, 3))
    J[..., 0, 0] = f / z
    J[..., 0, 2] = -f * x / z**2
    J[..., 1, 1] = f / z
    J[..., 1, 2] = -f * y / z**2
    if dense:
        return block_diagonal(J.reshape(-1, 2, 3)), J.reshape(-1, 3)
    return J, J.copy()


def block_diagonal(blocks):
    """``(K, 2, 3)`` per-point blocks to the dense ``(2K, 3K)`` matrix."""
    K = blocks.shape[0]
    out = np.zeros((2 * K, 3 * K))
    for k in range(K):
        out[2 * k : 2 * k + 2, 3 * k : 3 * k + 3] = blocks[k]
    return out


def weak_to_perspective(wp, focal=DEFAULT_FOCAL, principal_point=None):
    """Convert a crop weak-perspective camera to a full-image translation.

    Depth follows from matching the crop scale: ``z = 2 f / (s b)``. The
    in-plane translation is the crop translation plus the offset of the crop
    centre from the principal point, expressed at that depth.
    """
    if principal_point is None:
        principal_point = (DEFAULT_CROP / 2, DEFAULT_CROP / 2)
    bs = wp.scale * wp.box_size
    tz = 2.0 * focal / bs
    tx = wp.translation[0] + 2.0 * (wp.box_center[0] - principal_point[0]) / bs
    ty = wp.translation[1] + 2.0 * (wp.box_center[1] - principal_point[1]) / bs
    return Camera(focal=focal, principal_point=tuple(principal_point), translation=(tx, ty, tz))
