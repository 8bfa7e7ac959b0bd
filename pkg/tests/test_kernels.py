import os
import subprocess
import sys

import numpy as np
import pytest

from scorefit import kernels
from scorefit.body_model import make_toy_model
from scorefit.rotation import d_rot6d_to_matrix, random_rotations


def random_inputs(rng, n=3, J=24, K=24):
    model = make_toy_model(J, 10, seed=int(rng.integers(1000)))
    R = random_rotations(n * J, rng).reshape(n, J, 3, 3)
    P = rng.normal(0, 0.1, (1, K, J, 3))
    s = rng.dirichlet(np.ones(J), size=K)
    D = d_rot6d_to_matrix(rng.normal(size=(n, J, 6)), flat=False)
    return model, R, P, s, D


def test_backend_registry():
    assert "python" in kernels.BACKENDS
    assert kernels.get().name == kernels.BACKEND
    with pytest.raises(ValueError):
        kernels.Kernels("fortran")
    prev = kernels.set_backend("python")
    try:
        assert kernels.get().name == "python"
    finally:
        kernels.set_backend(prev)


@pytest.mark.skipif(len(kernels.BACKENDS) < 2, reason="compiled extension not built")
def test_backends_agree(rng):
    py, ext = kernels.Kernels("python"), kernels.Kernels("compiled")
    for _ in range(5):
        model, R, P, s, D = random_inputs(rng)
        parents, rest = model.kinematic_parents, model.joint_template_regressor @ model.template_vertices
        a, b = py.chain(parents, rest, R), ext.chain(parents, rest, R)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)
        Rg, tg = a
        np.testing.assert_allclose(py.regress_joints(Rg, tg, P, s), ext.regress_joints(Rg, tg, P, s), atol=1e-12)
        np.testing.assert_allclose(
            py.pose_jacobian(parents, Rg, tg, P, s, D), ext.pose_jacobian(parents, Rg, tg, P, s, D), atol=1e-11
        )
        W = rng.dirichlet(np.ones(24), size=model.n_vertices)
        v = np.broadcast_to(model.template_vertices, (R.shape[0],) + model.template_vertices.shape)
        np.testing.assert_allclose(py.skin(Rg, tg, rest, W, v), ext.skin(Rg, tg, rest, W, v), atol=1e-12)


def test_non_contiguous_inputs(rng, backend):
    model, R, P, s, D = random_inputs(rng)
    parents, rest = model.kinematic_parents, model.joint_template_regressor @ model.template_vertices
    Rg, tg = backend.chain(parents, rest, R)
    Rg2, tg2 = backend.chain(parents[::1].astype(np.int32), np.asfortranarray(rest), R.transpose(0, 1, 3, 2).copy().transpose(0, 1, 3, 2))
    np.testing.assert_array_equal(Rg, Rg2)
    np.testing.assert_array_equal(tg, tg2)


def test_env_selects_python_fallback():
    env = dict(os.environ, SCOREFIT_PURE_PYTHON="1")
    code = "from scorefit import kernels; print(kernels.get().name, sorted(kernels.BACKENDS))"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.split()[0] == "python"
