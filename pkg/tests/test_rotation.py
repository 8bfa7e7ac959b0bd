import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scorefit.errors import DegenerateInput, NotARotation
from scorefit.rotation import (
    IDENTITY_6D,
    axis_angle_to_matrix,
    d_rot6d_to_matrix,
    matrix_to_axis_angle,
    matrix_to_rot6d,
    random_rotations,
    rot6d_to_matrix,
)

from conftest import central_diff, rel_err

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def well_posed(r):
    a, b = r[:3], r[3:]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-2 or nb < 1e-2:
        return False
    return np.linalg.norm(np.cross(a / na, b / nb)) > 1e-2


def test_identity():
    np.testing.assert_allclose(rot6d_to_matrix(IDENTITY_6D), np.eye(3))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=finite))
def test_gram_schmidt_gives_rotation(r):
    if not well_posed(r):
        return
    R = rot6d_to_matrix(r)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    # first column is the normalized first input column
    np.testing.assert_allclose(R[:, 0], r[:3] / np.linalg.norm(r[:3]), atol=1e-12)
    # second column lies in the span of the inputs on b's side
    assert R[:, 1] @ r[3:] > 0


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=finite), st.floats(0.1, 10))
def test_scale_invariance(r, k):
    if not well_posed(r):
        return
    r2 = np.concatenate([k * r[:3], 3 * k * r[3:]])
    np.testing.assert_allclose(rot6d_to_matrix(r2), rot6d_to_matrix(r), atol=1e-10)


def test_matrix_roundtrip(rng):
    R = random_rotations(500, rng)
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-12)


def test_column_layout():
    R = axis_angle_to_matrix(np.array([0.3, -0.2, 0.9]))
    r = matrix_to_rot6d(R)
    np.testing.assert_allclose(r[:3], R[:, 0])
    np.testing.assert_allclose(r[3:], R[:, 1])


def test_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        rot6d_to_matrix(np.zeros(6))
    with pytest.raises(DegenerateInput):
        rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))
    with pytest.raises(DegenerateInput):
        rot6d_to_matrix(np.array([np.nan, 0, 0, 0, 1, 0]))
    with pytest.raises(NotARotation):
        matrix_to_rot6d(2 * np.eye(3))
    with pytest.raises(NotARotation):
        matrix_to_rot6d(np.diag([1.0, 1.0, -1.0]))


def test_jacobian_matches_fd(rng):
    for _ in range(100):
        r = rng.standard_normal(6)
        J = d_rot6d_to_matrix(r)  # (9, 6), row 3i+j is R[i, j]
        fd = central_diff(lambda v: rot6d_to_matrix(v).reshape(9), r, h=1e-5)
        assert rel_err(J, fd) < 1e-5


def test_jacobian_batched_layout(rng):
    r = rng.standard_normal((4, 2, 6))
    J = d_rot6d_to_matrix(r, flat=False)
    assert J.shape == (4, 2, 3, 3, 6)
    np.testing.assert_allclose(J[1, 1].reshape(9, 6), d_rot6d_to_matrix(r[1, 1]))


def test_jacobian_kills_scaling_directions(rng):
    # moving along a, or along b within the (a, b) plane's b-direction, leaves R unchanged
    r = rng.standard_normal(6)
    J = d_rot6d_to_matrix(r)
    np.testing.assert_allclose(J @ np.concatenate([r[:3], np.zeros(3)]), 0, atol=1e-12)
    np.testing.assert_allclose(J @ np.concatenate([np.zeros(3), r[3:]]), 0, atol=1e-12)


def test_axis_angle_roundtrip(rng):
    axes = rng.standard_normal((300, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(0, np.pi - 1e-6, 300)
    v = axes * angles[:, None]
    np.testing.assert_allclose(matrix_to_axis_angle(axis_angle_to_matrix(v)), v, atol=1e-7)


@pytest.mark.parametrize("angle", [0.0, 1e-12, 1e-6, np.pi - 1e-4, np.pi])
def test_axis_angle_edge_angles(angle):
    axis = np.array([2.0, -1.0, 0.5]) / np.linalg.norm([2.0, -1.0, 0.5])
    R = axis_angle_to_matrix(axis * angle)
    back = matrix_to_axis_angle(R)
    np.testing.assert_allclose(axis_angle_to_matrix(back), R, atol=1e-9)
    assert np.linalg.norm(back) == pytest.approx(angle, abs=1e-7)


def test_rodrigues_against_series(rng):
    # independent route: matrix exponential by truncated power series
    for _ in range(10):
        v = rng.standard_normal(3)
        K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
        E, term = np.eye(3), np.eye(3)
        for k in range(1, 40):
            term = term @ K / k
            E = E + term
        np.testing.assert_allclose(axis_angle_to_matrix(v), E, atol=1e-12)
