import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scorefit import diffusion as df
from scorefit.errors import InvalidStep

# alpha_bar from a 40-digit evaluation of the clipped cosine schedule (T=1000, s=0.008)
MPMATH_ALPHA_BAR = {
    1: 0.9999587157751782222,
    2: 0.99991257592736802134,
    50: 0.99200727868421880764,
    100: 0.97209273711396917433,
    300: 0.786910511150829316,
    500: 0.49384359044063771332,
    999: 2.428766907034468356e-6,
    1000: 2.428766907034468356e-9,
}


@pytest.fixture(scope="module")
def sched():
    return df.cosine_schedule()


def test_schedule_against_high_precision(sched):
    for t, ref in MPMATH_ALPHA_BAR.items():
        assert sched.alpha_bar[t] == pytest.approx(ref, rel=1e-11)


def test_schedule_shape_and_monotone(sched):
    assert sched.T == 1000 and sched.alpha_bar.shape == (1001,)
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(sched.zeta <= 0.999) and sched.zeta[-1] == pytest.approx(0.999)
    np.testing.assert_allclose(np.cumprod(1 - sched.zeta), sched.alpha_bar[1:], rtol=1e-14)


def test_descriptor_roundtrip(sched):
    other = df.schedule_from_descriptor(sched.descriptor())
    np.testing.assert_array_equal(other.alpha_bar, sched.alpha_bar)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
def test_q_sample_predict_x0_inverse(t, seed):
    sched = df.cosine_schedule()
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal(7), rng.standard_normal(7)
    xt = df.q_sample(sched, x0, t, eps)
    tol = 1e-9 / max(np.sqrt(sched.alpha_bar[t]), 1e-3)
    np.testing.assert_allclose(df.predict_x0(sched, xt, t, eps), x0, atol=max(tol, 1e-9))


def test_batched_timesteps(sched, rng):
    x0, eps = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    t = np.array([1, 50, 700])
    xt = df.q_sample(sched, x0, t, eps)
    for i in range(3):
        np.testing.assert_allclose(xt[i], df.q_sample(sched, x0[i], int(t[i]), eps[i]))


def test_ddim_step_exact_noise_consistency(sched, rng):
    # with the true noise, a deterministic step lands exactly on the forward marginal
    x0, eps = rng.standard_normal(9), rng.standard_normal(9)
    xt = df.q_sample(sched, x0, 80, eps)
    np.testing.assert_allclose(df.ddim_step(sched, xt, 80, 40, eps), df.q_sample(sched, x0, 40, eps), atol=1e-12)
    np.testing.assert_allclose(df.ddim_step(sched, xt, 80, 0, eps), x0, atol=1e-12)
    np.testing.assert_allclose(df.ddim_invert_step(sched, df.q_sample(sched, x0, 40, eps), 40, 80, eps), xt, atol=1e-12)


def test_step_order_errors(sched):
    x = np.zeros(3)
    with pytest.raises(InvalidStep):
        df.ddim_step(sched, x, 10, 10, x)
    with pytest.raises(InvalidStep):
        df.ddim_invert_step(sched, x, 10, 5, x)
    with pytest.raises(InvalidStep):
        df.q_sample(sched, x, 0, x)
    with pytest.raises(InvalidStep):
        df.timestep_grid(10, 0)
    with pytest.raises(InvalidStep):
        df.timestep_grid(5, 10)


def test_timestep_grid():
    assert df.timestep_grid(50, 2) == list(range(0, 51, 2))
    assert df.timestep_grid(10, 3) == [0, 3, 6, 9, 10]
    assert df.timestep_grid(100, 10)[-1] == 100


def test_score_relation(sched, rng):
    eps = rng.standard_normal(4)
    np.testing.assert_allclose(df.score_from_noise(sched, eps, 100), -eps / np.sqrt(1 - sched.alpha_bar[100]))


def test_gaussian_eps_is_exact_score(sched, rng):
    # the analytic noise predictor must reproduce the Gaussian marginal score
    mean, std = rng.standard_normal(4), 0.3
    eps_fn = df.gaussian_eps(sched, mean, std)
    for t in (1, 50, 400):
        ab = sched.alpha_bar[t]
        x = rng.standard_normal(4)
        var = ab * std**2 + 1 - ab
        score = -(x - np.sqrt(ab) * mean) / var
        np.testing.assert_allclose(df.score_from_noise(sched, eps_fn(x, t), t), score, rtol=1e-12)


def euler_sigma_roundtrip_factor(sched, s, tau, dt):
    """Roundtrip gain for N(0, s^2) data, written as Euler steps in sigma = sqrt((1 - ab) / ab)."""
    grid = list(range(0, tau, dt)) + [tau]
    sig = [np.sqrt((1 - sched.alpha_bar[t]) / sched.alpha_bar[t]) for t in grid]
    g = 1.0
    for a, b in zip(sig[:-1], sig[1:]):
        g *= 1 + (b - a) * a / (s**2 + a**2)
    for a, b in zip(sig[:-1], sig[1:]):
        g *= 1 - (b - a) * b / (s**2 + b**2)
    return g


@pytest.mark.parametrize("s,tau,dt", [(0.5, 50, 2), (0.1, 50, 2), (1.0, 100, 10), (0.05, 30, 3)])
def test_roundtrip_matches_sigma_euler_oracle(sched, rng, s, tau, dt):
    mean = rng.standard_normal(6)
    eps_fn = df.gaussian_eps(sched, mean, s)
    x0 = mean + s * rng.standard_normal((20, 6))
    back = df.ddim_sample(sched, eps_fn, df.ddim_invert(sched, eps_fn, x0, tau, dt), tau, dt)
    g = euler_sigma_roundtrip_factor(sched, s, tau, dt)
    np.testing.assert_allclose(back - mean, g * (x0 - mean), atol=1e-12)


def test_roundtrip_error_shrinks_with_step(sched, rng):
    errs = [abs(1 - euler_sigma_roundtrip_factor(sched, 0.3, 60, dt)) for dt in (6, 3, 2, 1)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_ddpm_diagnostic_matches_gaussian_moments(sched):
    rng = np.random.default_rng(5)
    mean, std = np.array([0.5, -1.0]), 0.4
    x = df.ddpm_sample_diagnostic(sched, df.gaussian_eps(sched, mean, std), (4000, 2), rng)
    np.testing.assert_allclose(x.mean(axis=0), mean, atol=0.05)
    np.testing.assert_allclose(x.std(axis=0), std, rtol=0.08)
