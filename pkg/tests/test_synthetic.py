import numpy as np
import pytest

from scorefit.guidance import loss_repr
from scorefit.rotation import rot6d_to_matrix
from scorefit.synthetic import CaseSpec, MultiViewSpec, SequenceSpec, SyntheticWorld, spec_from_dict, spec_to_dict


@pytest.fixture(scope="module")
def world():
    return SyntheticWorld(0)


def assert_same_case(a, b):
    for name in ("gt_pose", "init_pose", "beta", "features", "gt_joints", "keypoints", "conf"):
        x, y = getattr(a, name), getattr(b, name)
        if x is None:
            assert y is None
        else:
            np.testing.assert_array_equal(x, y)


def test_determinism(world):
    assert_same_case(world.make_case(5), world.make_case(5))
    assert_same_case(world.make_sequence_case(2), SyntheticWorld(0).make_sequence_case(2))
    assert not np.array_equal(world.make_case(5).gt_pose, world.make_case(6).gt_pose)


def test_poses_are_orthonormal_6d(world, rng):
    x = world.sample_poses(rng, 20).reshape(20, 24, 6)
    a, b = x[..., :3], x[..., 3:]
    np.testing.assert_allclose(np.linalg.norm(a, axis=-1), 1, atol=1e-12)
    np.testing.assert_allclose(np.sum(a * b, axis=-1), 0, atol=1e-12)


def test_zero_noise_case(world):
    spec = CaseSpec(px_noise=0.0, rot_noise=0.0, dropout=0.0, feature_noise=0.0)
    case = world.make_case(3, spec)
    np.testing.assert_array_equal(case.init_pose, case.gt_pose)
    loss, _, _ = loss_repr(case.gt_pose, case.beta, world.model, case.camera_gt[0], case.keypoints, case.conf)
    assert loss == pytest.approx(0, abs=1e-16)
    assert np.all(case.conf == 1)


def test_init_rotation_noise_magnitude(world):
    errs = []
    for s in range(40):
        c = world.make_case(s)
        Rg = rot6d_to_matrix(c.gt_pose.reshape(24, 6))
        Ri = rot6d_to_matrix(c.init_pose.reshape(24, 6))
        cos = (np.trace(np.swapaxes(Rg, 1, 2) @ Ri, axis1=1, axis2=2) - 1) / 2
        errs.append(np.arccos(np.clip(cos, -1, 1)))
    rms = np.sqrt(np.mean(np.concatenate(errs) ** 2))
    assert rms == pytest.approx(0.1, rel=0.05)


def test_keypoint_noise_statistics(world):
    # the loss at ground truth equals the expected confidence-weighted squared pixel noise
    ratios = []
    for s in range(1000):
        c = world.make_case(s)
        loss, _, _ = loss_repr(c.gt_pose, c.beta, world.model, c.camera_gt[0], c.keypoints, c.conf)
        ratios.append((loss, c.conf.sum() * c.spec.px_noise**2))
    loss, expected = np.sum(ratios, axis=0)
    assert loss / expected == pytest.approx(1.0, abs=0.2)
    assert np.mean([c for _, c in ratios]) / (24 * 9) == pytest.approx(0.9, abs=0.02)


def test_keypoints_inside_crop(world):
    for s in range(20):
        kp = world.make_case(s).keypoints
        assert np.all((kp > -20) & (kp < 244))


def test_multiview_shares_body_pose(world):
    c = world.make_multiview_case(1, MultiViewSpec(n_views=4))
    assert c.gt_pose.shape == (4, 144)
    np.testing.assert_allclose(c.gt_pose[:, 6:] - c.gt_pose[0, 6:], 0, atol=1e-12)
    assert not np.allclose(c.gt_pose[0, :6], c.gt_pose[1, :6])


def test_sequence_is_smooth(world):
    c = world.make_sequence_case(0, SequenceSpec())
    assert c.gt_pose.shape == (60, 144)
    gt_acc = np.abs(np.diff(c.gt_joints, 2, axis=0)).mean()
    init_acc = np.abs(np.diff(np.asarray(world.model.joint_map(c.beta).joints(c.init_pose)), 2, axis=0)).mean()
    assert gt_acc < 0.2 * init_acc


def test_spec_dict_roundtrip():
    for spec in (CaseSpec(px_noise=2.0), SequenceSpec(n_frames=10), MultiViewSpec(n_views=3)):
        assert spec_from_dict(spec_to_dict(spec)) == spec
