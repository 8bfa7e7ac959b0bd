"""Rotation conversions between the 6D, matrix and axis-angle forms.

The 6D form stores the first two *columns* of a rotation matrix, ``(a, b)``.
All functions broadcast over leading axes.
"""
import numpy as np

from .errors import DegenerateInput, NotARotation

_EPS_NORM = 1e-8
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def _check6(r):
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise DegenerateInput(f"expected trailing dimension 6, got shape {r.shape}")
    return r


def _gram_schmidt(r):
    r = _check6(r)
    a, b = r[..., :3], r[..., 3:]
    na = np.linalg.norm(a, axis=-1)
    if np.any(~np.isfinite(r)) or np.any(na <= _EPS_NORM):
        raise DegenerateInput("first 6D column has (near) zero norm or non-finite entries")
    c1 = a / na[..., None]
    dot = np.sum(c1 * b, axis=-1)
    u = b - dot[..., None] * c1
    nu = np.linalg.norm(u, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(nu <= _EPS_NORM * np.maximum(nb, 1.0)):
        raise DegenerateInput("6D columns are (near) parallel")
    c2 = u / nu[..., None]
    c3 = np.cross(c1, c2)
    return c1, c2, c3, na, nu, dot


def rot6d_to_matrix(r):
    """Map 6D vectors ``(..., 6)`` to rotation matrices ``(..., 3, 3)``."""
    c1, c2, c3, *_ = _gram_schmidt(r)
    return np.stack([c1, c2, c3], axis=-1)


def matrix_to_rot6d(R, check=True):
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise NotARotation(f"expected (..., 3, 3), got {R.shape}")
    if check:
        err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max(initial=0.0)
        det = np.linalg.det(R) if R.size else np.ones(1)
        if err > 1e-6 or np.abs(det - 1.0).max(initial=0.0) > 1e-6:
            raise NotARotation(f"orthonormality error {err:.3g}")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def _skew(v):
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [np.stack([z, -w, y], -1), np.stack([w, z, -x], -1), np.stack([-y, x, z], -1)], -2
    )


def axis_angle_to_matrix(v):
    """Rodrigues' formula with a Taylor branch for tiny angles."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    # sin(t)/t and (1-cos t)/t^2 with series fallbacks
    A = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    B = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / th**2)
    K = _skew(v)
    return np.eye(3) + A[..., None, None] * K + B[..., None, None] * (K @ K)


def matrix_to_axis_angle(R):
    R = np.asarray(R, dtype=np.float64)
    w = 0.5 * np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1
    )
    s = np.linalg.norm(w, axis=-1)
    c = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    theta = np.arctan2(s, c)

    small = s < 1e-7
    safe_s = np.where(small, 1.0, s)
    scale = np.where(small & (c > 0), 1.0 + theta**2 / 6.0, theta / safe_s)
    out = w * scale[..., None]

    # near pi the antisymmetric part vanishes: recover the axis from the symmetric part
    near_pi = c < -0.7
    if np.any(near_pi):
        B = 0.5 * (R + np.swapaxes(R, -1, -2)) - c[..., None, None] * np.eye(3)
        Bp = B[near_pi]
        diag = np.diagonal(Bp, axis1=-2, axis2=-1)
        k = np.argmax(diag, axis=-1)
        col = Bp[np.arange(len(k)), :, k]
        n = col / np.linalg.norm(col, axis=-1, keepdims=True)
        wp = w[near_pi]
        sgn = np.sign(np.sum(n * wp, axis=-1))
        # exact pi: pick the sign giving a positive leading nonzero component
        lead = n[np.arange(len(n)), np.argmax(np.abs(n) > 1e-12, axis=-1)]
        sgn = np.where(sgn == 0, np.sign(lead), sgn)
        out[near_pi] = n * (sgn * theta[near_pi])[..., None]
    return out


def d_rot6d_to_matrix(r, flat=True):
    """Analytic Jacobian of :func:`rot6d_to_matrix`.

    Returns ``(..., 9, 6)`` with row ``3*i + j`` holding ``dR[i, j]``, or
    ``(..., 3, 3, 6)`` when ``flat`` is false.
    """
    c1, c2, c3, na, nu, dot = _gram_schmidt(r)
    r = np.asarray(r, dtype=np.float64)
    b = r[..., 3:]
    eye = np.eye(3)
    outer = lambda x, y: x[..., :, None] * y[..., None, :]

    dc1_da = (eye - outer(c1, c1)) / na[..., None, None]
    # u = b - (c1.b) c1
    du_dc1 = -dot[..., None, None] * eye - outer(c1, b)
    du_db = eye - outer(c1, c1)
    P2 = (eye - outer(c2, c2)) / nu[..., None, None]
    dc2_da = P2 @ du_dc1 @ dc1_da
    dc2_db = P2 @ du_db
    # c3 = c1 x c2
    dc3_da = -_skew(c2) @ dc1_da + _skew(c1) @ dc2_da
    dc3_db = _skew(c1) @ dc2_db

    zero = np.zeros_like(dc1_da)
    J = np.empty(c1.shape[:-1] + (3, 3, 6))
    # column j of R is c_{j+1}; entry R[i, j] = c_{j+1}[i]
    J[..., :, 0, :3], J[..., :, 0, 3:] = dc1_da, zero
    J[..., :, 1, :3], J[..., :, 1, 3:] = dc2_da, dc2_db
    J[..., :, 2, :3], J[..., :, 2, 3:] = dc3_da, dc3_db
    if flat:
        return J.reshape(c1.shape[:-1] + (9, 6))
    return J


def random_rotations(n, rng):
    """Uniformly distributed rotations via normalized Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def pose6d_to_axis_angle(pose):
    """``(..., 144)`` 6D pose vector to ``(..., 24, 3)`` axis-angle."""
    pose = np.asarray(pose, dtype=np.float64)
    R = rot6d_to_matrix(pose.reshape(pose.shape[:-1] + (-1, 6)))
    return matrix_to_axis_angle(R)


def axis_angle_to_pose6d(aa):
    aa = np.asarray(aa, dtype=np.float64)
    R = axis_angle_to_matrix(aa)
    return matrix_to_rot6d(R, check=False).reshape(aa.shape[:-2] + (-1,))
