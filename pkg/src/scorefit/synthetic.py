"""Synthetic stand-ins for regression networks, detectors and datasets.

A :class:`SyntheticWorld` fixes everything shared between training data and
evaluation cases: the toy body model, a low-dimensional pose manifold and
the linear map producing image features from a pose. Cases are then drawn
deterministically from a case seed.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import body_model as bm
from .camera import DEFAULT_CROP, DEFAULT_FOCAL, Camera, project
from .rotation import (
    axis_angle_to_matrix,
    matrix_to_rot6d,
    rot6d_to_matrix,
)

N_JOINTS = 24
POSE_DIM = 6 * N_JOINTS


@dataclass(frozen=True)
class CaseSpec:
    px_noise: float = 3.0  # RMS 2D keypoint displacement, pixels
    rot_noise: float = 0.1  # RMS per-joint init rotation error, radians
    dropout: float = 0.1
    feature_noise: float = 0.1
    cam_noise: float = 0.0  # relative perturbation of the init camera translation
    focal: float = DEFAULT_FOCAL
    crop: float = DEFAULT_CROP
    beta_std: float = 0.5


@dataclass(frozen=True)
class SequenceSpec(CaseSpec):
    n_frames: int = 60
    fps: float = 30.0
    cutoff_hz: float = 1.0
    with_keypoints: bool = True


@dataclass(frozen=True)
class MultiViewSpec(CaseSpec):
    n_views: int = 4


@dataclass
class SyntheticCase:
    seed: int
    spec: CaseSpec
    gt_pose: np.ndarray  # (..., 144)
    init_pose: np.ndarray
    beta: np.ndarray
    features: np.ndarray  # (..., d)
    gt_joints: np.ndarray  # (..., K, 3)
    camera_gt: list = field(default_factory=list)
    camera_init: list = field(default_factory=list)
    keypoints: np.ndarray | None = None  # (..., K, 2)
    conf: np.ndarray | None = None  # (..., K)

    @property
    def is_batch(self):
        return self.gt_pose.ndim == 2


def _rx(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def compose_rotation_noise(pose, aa):
    """Right-multiply each joint rotation of ``pose`` by ``exp(aa)``."""
    shp = pose.shape
    R = rot6d_to_matrix(pose.reshape(shp[:-1] + (N_JOINTS, 6)))
    R = R @ axis_angle_to_matrix(aa)
    return matrix_to_rot6d(R, check=False).reshape(shp)


def lowpass_noise(rng, n_frames, dims, fps, cutoff_hz):
    """Unit-variance Gaussian noise smoothed along time by a Gaussian kernel."""
    sigma_frames = fps / (2 * np.pi * cutoff_hz)
    pad = int(np.ceil(4 * sigma_frames))
    white = rng.standard_normal((n_frames + 2 * pad,) + tuple(np.atleast_1d(dims)))
    k = np.arange(-pad, pad + 1)
    kern = np.exp(-0.5 * (k / sigma_frames) ** 2)
    kern /= np.sqrt(np.sum(kern**2))
    out = np.apply_along_axis(lambda s: np.convolve(s, kern, mode="valid"), 0, white)
    return out[:n_frames]


class SyntheticWorld:
    """Shared generative structure for training pairs and evaluation cases."""

    def __init__(self, seed=0, manifold_dim=12, manifold_scale=0.6, pose_jitter=0.05, feature_dim=32):
        self.seed = seed
        self.manifold_dim = manifold_dim
        self.manifold_scale = manifold_scale
        self.pose_jitter = pose_jitter
        self.feature_dim = feature_dim
        rng = np.random.default_rng([seed, 7])
        self.model = bm.make_toy_model(N_JOINTS, 10, seed=seed)
        basis, _ = np.linalg.qr(rng.standard_normal((POSE_DIM - 6, manifold_dim)))
        self.basis = basis
        self.feature_map = rng.standard_normal((feature_dim, POSE_DIM)) / np.sqrt(POSE_DIM) * 3.0
        self.reference_pose = bm.identity_pose(N_JOINTS)

    def describe(self):
        return {
            "world_seed": self.seed,
            "manifold_dim": self.manifold_dim,
            "manifold_scale": self.manifold_scale,
            "pose_jitter": self.pose_jitter,
            "feature_dim": self.feature_dim,
        }

    @classmethod
    def from_description(cls, desc, feature_dim=32):
        """Rebuild the world recorded by :meth:`describe` (e.g. in checkpoint metadata)."""
        desc = desc or {}
        return cls(
            seed=int(desc.get("world_seed", 0)),
            manifold_dim=int(desc.get("manifold_dim", 12)),
            manifold_scale=float(desc.get("manifold_scale", 0.6)),
            pose_jitter=float(desc.get("pose_jitter", 0.05)),
            feature_dim=int(desc.get("feature_dim", feature_dim)),
        )

    # -- poses

    def body_from_latent(self, z):
        """Manifold coordinates ``(..., k)`` to orthonormalized body 6D ``(..., 138)``."""
        raw = self.reference_pose[6:] + self.manifold_scale * z @ self.basis.T
        shp = raw.shape
        R = rot6d_to_matrix(raw.reshape(shp[:-1] + (N_JOINTS - 1, 6)))
        return matrix_to_rot6d(R, check=False).reshape(shp)

    def root_rotation(self, yaw, tilt=None):
        yaw = np.atleast_1d(yaw)
        R = np.stack([_rx(np.pi) @ _ry(a) for a in yaw])
        if tilt is not None:
            R = R @ axis_angle_to_matrix(np.atleast_2d(tilt))
        return R

    def sample_poses(self, rng, n):
        z = rng.standard_normal((n, self.manifold_dim))
        body = self.body_from_latent(z)
        root = self.root_rotation(rng.uniform(-np.pi, np.pi, n), rng.normal(0, 0.1, (n, 3)))
        pose = np.concatenate([matrix_to_rot6d(root), body], axis=1)
        jitter = rng.normal(0, self.pose_jitter / np.sqrt(3), (n, N_JOINTS, 3))
        return compose_rotation_noise(pose, jitter)

    def features(self, rng, pose, noise=0.1):
        pose = np.asarray(pose)
        c = (pose - self.reference_pose) @ self.feature_map.T
        return c + noise * rng.standard_normal(c.shape)

    def training_pairs(self, n, seed=0, feature_noise=0.1):
        rng = np.random.default_rng([self.seed, seed, 11])
        x0 = self.sample_poses(rng, n)
        return self.features(rng, x0, feature_noise), x0

    def perturb(self, rng, pose, rot_noise):
        aa = rng.normal(0, rot_noise / np.sqrt(3), np.shape(pose)[:-1] + (N_JOINTS, 3))
        return compose_rotation_noise(np.asarray(pose), aa)

    # -- cameras and keypoints

    def camera(self, rng, spec):
        s = rng.uniform(0.8, 1.0)
        tz = 2 * spec.focal / (s * spec.crop)
        txy = rng.uniform(-0.05, 0.05, 2)
        return Camera(spec.focal, (spec.crop / 2, spec.crop / 2), (txy[0], txy[1], tz))

    def keypoints(self, rng, cam, joints, spec):
        uv = project(cam, joints)
        uv = uv + rng.normal(0, spec.px_noise / np.sqrt(2), uv.shape)
        conf = (rng.uniform(size=uv.shape[:-1]) >= spec.dropout).astype(np.float64)
        return uv, conf

    def perturb_camera(self, rng, cam, spec):
        if spec.cam_noise <= 0:
            return cam
        g = cam.gamma * (1 + spec.cam_noise * rng.standard_normal(3))
        g[2] = max(g[2], 1.0)
        return cam.with_translation(g)

    # -- cases

    def make_case(self, seed, spec=CaseSpec()):
        """Single-frame keypoint-fitting case."""
        rng = np.random.default_rng([self.seed, seed, 101])
        gt = self.sample_poses(rng, 1)[0]
        beta = rng.normal(0, spec.beta_std, self.model.n_shape)
        cam = self.camera(rng, spec)
        joints = self.model.joint_map(beta).joints(gt)
        kp, conf = self.keypoints(rng, cam, joints, spec)
        c = self.features(rng, gt, spec.feature_noise)
        init = self.perturb(rng, gt, spec.rot_noise) if spec.rot_noise > 0 else gt.copy()
        return SyntheticCase(
            seed=seed, spec=spec, gt_pose=gt, init_pose=init, beta=beta, features=c,
            gt_joints=joints, camera_gt=[cam], camera_init=[self.perturb_camera(rng, cam, spec)],
            keypoints=kp, conf=conf,
        )

    def make_multiview_case(self, seed, spec=MultiViewSpec()):
        """One body pose seen from ``n_views`` uncalibrated viewpoints."""
        rng = np.random.default_rng([self.seed, seed, 202])
        base = self.sample_poses(rng, 1)[0]
        yaw = rng.uniform(-np.pi, np.pi) + np.arange(spec.n_views) * 2 * np.pi / spec.n_views
        roots = self.root_rotation(yaw, rng.normal(0, 0.1, (spec.n_views, 3)))
        gt = np.tile(base, (spec.n_views, 1))
        gt[:, :6] = matrix_to_rot6d(roots)
        beta = rng.normal(0, spec.beta_std, self.model.n_shape)
        joints = self.model.joint_map(beta).joints(gt)
        c = self.features(rng, gt, spec.feature_noise)
        init = self.perturb(rng, gt, spec.rot_noise) if spec.rot_noise > 0 else gt.copy()
        return SyntheticCase(seed=seed, spec=spec, gt_pose=gt, init_pose=init, beta=beta, features=c, gt_joints=joints)

    def make_sequence_case(self, seed, spec=SequenceSpec()):
        """Smooth motion on the pose manifold with i.i.d. per-frame init jitter."""
        rng = np.random.default_rng([self.seed, seed, 303])
        F = spec.n_frames
        z = lowpass_noise(rng, F, self.manifold_dim, spec.fps, spec.cutoff_hz)
        body = self.body_from_latent(z)
        yaw0 = rng.uniform(-np.pi, np.pi)
        yaw = yaw0 + 0.3 * lowpass_noise(rng, F, 1, spec.fps, spec.cutoff_hz / 2)[:, 0]
        tilt = 0.1 * lowpass_noise(rng, F, 3, spec.fps, spec.cutoff_hz)
        root = self.root_rotation(yaw, tilt)
        gt = np.concatenate([matrix_to_rot6d(root), body], axis=1)
        jit = self.pose_jitter / np.sqrt(3) * lowpass_noise(rng, F, (N_JOINTS, 3), spec.fps, spec.cutoff_hz)
        gt = compose_rotation_noise(gt, jit)
        beta = rng.normal(0, spec.beta_std, self.model.n_shape)
        joints = self.model.joint_map(beta).joints(gt)
        c = self.features(rng, gt, spec.feature_noise)
        init = self.perturb(rng, gt, spec.rot_noise) if spec.rot_noise > 0 else gt.copy()
        cam = self.camera(rng, spec)
        case = SyntheticCase(
            seed=seed, spec=spec, gt_pose=gt, init_pose=init, beta=beta, features=c, gt_joints=joints,
            camera_gt=[cam] * F, camera_init=[self.perturb_camera(rng, cam, spec)] * F,
        )
        if spec.with_keypoints:
            case.keypoints, case.conf = self.keypoints(rng, cam, joints, spec)
        return case


def spec_to_dict(spec):
    out = asdict(spec)
    out["kind"] = type(spec).__name__
    return out


def spec_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "CaseSpec")
    cls = {"CaseSpec": CaseSpec, "SequenceSpec": SequenceSpec, "MultiViewSpec": MultiViewSpec}[kind]
    return cls(**d)
