"""3D pose metrics. Inputs are in meters, outputs in millimeters."""
import numpy as np

from .errors import DegenerateConfiguration, DimensionMismatch, TooFewFrames

SMPL_14_SUBSET = (1, 2, 4, 5, 7, 8, 12, 15, 16, 17, 18, 19, 20, 21)


def _pair(pred, gt, joints=None):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if joints is not None:
        idx = list(joints)
        pred, gt = pred[..., idx, :], gt[..., idx, :]
    return pred, gt


def mpjpe(pred, gt, pelvis_index=0, joints=None):
    """Mean joint distance after subtracting the pelvis joint from both sets."""
    pred, gt = _pair(pred, gt)
    pred = pred - pred[..., pelvis_index : pelvis_index + 1, :]
    gt = gt - gt[..., pelvis_index : pelvis_index + 1, :]
    if joints is not None:
        pred, gt = pred[..., list(joints), :], gt[..., list(joints), :]
    return 1000.0 * np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def similarity_align(src, dst):
    """Similarity transform ``s R src + t`` closest to ``dst`` in least squares."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    X, Y = src - mu_s, dst - mu_d
    var = np.sum(X * X)
    M = X.T @ Y
    U, sv, Vt = np.linalg.svd(M)
    if var <= 1e-24 or sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("cross-covariance has rank < 2; rotation undetermined")
    Z = np.eye(3)
    Z[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ Z @ U.T
    scale = np.trace(R @ M) / var
    t = mu_d - scale * R @ mu_s
    return scale, R, t


def pa_mpjpe(pred, gt, joints=None):
    pred, gt = _pair(pred, gt, joints)
    if pred.shape[-2] < 3:
        raise DegenerateConfiguration("Procrustes alignment needs at least 3 joints")
    if pred.ndim == 3:
        return np.array([pa_mpjpe(p, g) for p, g in zip(pred, gt)])
    s, R, t = similarity_align(pred, gt)
    aligned = s * pred @ R.T + t
    return 1000.0 * np.linalg.norm(aligned - gt, axis=-1).mean()


def accel_error(pred_seq, gt_seq, fps=30.0, joints=None):
    """Mean norm of the second-difference mismatch, in mm/s^2."""
    pred, gt = _pair(pred_seq, gt_seq, joints)
    if pred.ndim != 3 or pred.shape[0] < 3:
        raise TooFewFrames("acceleration error needs a (frames >= 3, K, 3) sequence")
    acc = lambda x: (x[2:] - 2 * x[1:-1] + x[:-2]) * fps**2
    return 1000.0 * np.linalg.norm(acc(pred) - acc(gt), axis=-1).mean()
