"""Guidance losses, their latent gradients, and the modified noise prediction.

All losses are evaluated on one-step denoised estimates ``x0_hat`` and
return gradients with respect to them. The noise prediction is treated as
a constant of the latent, so the chain rule to ``x_t`` is a plain
``1/sqrt(alpha_bar)`` scaling inside :func:`modified_noise`.
"""
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DimensionMismatch, FormatError, InvalidStep, TooFewFrames, TooFewViews

BODY_SLICE = slice(6, None)


@dataclass(frozen=True)
class GuidanceWeights:
    rho_repr: float = 0.003
    rho_mv: float = 0.005
    rho_temp: float = 30.0
    use_repr: bool = True
    use_mv: bool = True
    use_temp: bool = True

    def __post_init__(self):
        if min(self.rho_repr, self.rho_mv, self.rho_temp) < 0:
            raise ValueError("guidance step sizes must be nonnegative")


@dataclass
class KeypointObservation:
    """2D keypoints ``(n, K, 2)`` with confidences ``(n, K)`` for ``n`` targets."""

    y_kp: np.ndarray
    y_conf: np.ndarray

    def __post_init__(self):
        self.y_kp = np.asarray(self.y_kp, dtype=np.float64)
        self.y_conf = np.asarray(self.y_conf, dtype=np.float64)
        if self.y_kp.shape[-1] != 2 or self.y_kp.shape[:-1] != self.y_conf.shape:
            raise DimensionMismatch(f"keypoints {self.y_kp.shape} vs confidences {self.y_conf.shape}")
        if np.any(self.y_conf < 0) or np.any(self.y_conf > 1):
            raise FormatError("keypoint confidences must lie in [0, 1]")


def camera_arrays(cams, n):
    """Stack one camera or a list of ``n`` cameras into focal, principal point and gamma arrays."""
    cams = list(cams) if isinstance(cams, (list, tuple)) else [cams] * n
    if len(cams) != n:
        raise DimensionMismatch(f"{len(cams)} cameras for {n} targets")
    focal = np.array([c.focal for c in cams], dtype=np.float64)
    pp = np.array([c.principal_point for c in cams], dtype=np.float64)
    gamma = np.array([c.gamma for c in cams])
    return focal, pp, gamma


def reprojection_terms(joints, jac, focal, pp, gamma, y_kp, y_conf):
    """Batched confidence-weighted reprojection loss.

    ``joints (n, K, 3)``, ``jac (n, 3K, D)``; camera arrays as from
    :func:`camera_arrays`. Returns ``(loss (n,), grad_x (n, D), grad_gamma (n, 3),
    residual (n, K, 2), J_proj (n, K, 2, 3))``.
    """
    p = joints + gamma[:, None, :]
    z = p[..., 2]
    bad = np.flatnonzero(z.reshape(-1) <= 1e-6)
    if bad.size:
        raise BehindCamera(bad)
    f = focal[:, None]
    uv = f[..., None] * p[..., :2] / z[..., None] + pp[:, None, :]
    r = uv - y_kp
    w = y_conf
    loss = np.sum(w * np.sum(r * r, axis=-1), axis=-1)
    Jp = np.zeros(p.shape[:-1] + (2, 3))
    Jp[..., 0, 0] = f / z
    Jp[..., 1, 1] = f / z
    Jp[..., 0, 2] = -f * p[..., 0] / z**2
    Jp[..., 1, 2] = -f * p[..., 1] / z**2
    g_joint = np.einsum("nk,nki,nkij->nkj", 2.0 * w, r, Jp)  # (n, K, 3)
    n, K = joints.shape[:2]
    grad_x = np.einsum("nk,nkd->nd", g_joint.reshape(n, 3 * K), jac)
    grad_gamma = g_joint.sum(axis=1)
    return loss, grad_x, grad_gamma, r, Jp


def loss_repr(x0_hat, beta, model, cam, y_kp, y_conf, joint_map=None, backend=None):
    """Reprojection loss of the pose ``x0_hat`` and its gradients.

    Accepts a single pose ``(144,)`` with one camera or a batch ``(n, 144)``
    with one camera or a list of ``n``. Returns ``(loss, grad_x0, grad_gamma)``
    shaped like the input batch.
    """
    x = np.asarray(x0_hat, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    jm = joint_map if joint_map is not None else model.joint_map(beta)
    joints, jac = jm.joints_and_jacobian(x, backend=backend)
    y_kp = np.broadcast_to(np.asarray(y_kp, dtype=np.float64), joints.shape[:2] + (2,))
    y_conf = np.broadcast_to(np.asarray(y_conf, dtype=np.float64), joints.shape[:2])
    focal, pp, gamma = camera_arrays(cam, n)
    loss, gx, gg, _, _ = reprojection_terms(joints, jac, focal, pp, gamma, y_kp, y_conf)
    if single:
        return float(loss[0]), gx[0], gg[0]
    return loss, gx, gg


def loss_mv(body_parts):
    """Cross-view spread of the body poses around their (detached) mean.

    ``body_parts`` is ``(N, 138)``; returns ``(loss, grads (N, 138))``.
    """
    b = np.asarray(body_parts, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] < 2:
        raise TooFewViews(f"cross-view guidance needs at least 2 views, got {b.shape[0] if b.ndim == 2 else b.ndim}")
    d = b - b.mean(axis=0)
    return float(np.sum(d * d)), 2.0 * d


def loss_temp(seq):
    """Sum of squared successive differences over a ``(N, D)`` sequence."""
    x = np.asarray(seq, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise TooFewFrames("temporal guidance needs at least 2 frames")
    d = np.diff(x, axis=0)
    g = np.zeros_like(x)
    g[1:] += 2.0 * d
    g[:-1] -= 2.0 * d
    return float(np.sum(d * d)), g


def modified_noise(sched, eps_hat, t, grad_x0, rho):
    """Shift the predicted noise by the guidance gradient carried to ``x_t``."""
    if not 1 <= t <= sched.T:
        raise InvalidStep(f"timestep {t} outside [1, {sched.T}]")
    if rho == 0:
        return np.array(eps_hat, dtype=np.float64, copy=True)
    grad_xt = np.asarray(grad_x0) / sched.sqrt_ab(t)
    return eps_hat + rho * sched.sqrt_1mab(t) * grad_xt
