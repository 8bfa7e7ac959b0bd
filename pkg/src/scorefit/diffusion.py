"""Noise schedule and the DDPM/DDIM kernel algebra.

Timesteps are integers in ``[0, T]`` with ``alpha_bar[0] == 1``. Every
function broadcasts over leading batch axes of the latent.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidStep


@dataclass(frozen=True, eq=False)
class Schedule:
    T: int
    zeta: np.ndarray  # (T,), zeta[t-1] is the increment for step t
    alpha_bar: np.ndarray  # (T + 1,)
    sigma: np.ndarray  # (T + 1,), all zero for deterministic sampling
    kind: str = "cosine"
    s: float = 0.008

    def descriptor(self):
        return {"kind": self.kind, "T": int(self.T), "s": float(self.s)}

    def sqrt_ab(self, t):
        return np.sqrt(self.alpha_bar[t])

    def sqrt_1mab(self, t):
        return np.sqrt(1.0 - self.alpha_bar[t])


def cosine_schedule(T=1000, s=0.008, max_zeta=0.999):
    if T < 2:
        raise ValueError("T must be >= 2")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
    ab = f / f[0]
    zeta = np.minimum(1.0 - ab[1:] / ab[:-1], max_zeta)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - zeta)])
    return Schedule(T=T, zeta=zeta, alpha_bar=alpha_bar, sigma=np.zeros(T + 1), kind="cosine", s=s)


def schedule_from_descriptor(desc):
    if desc.get("kind") != "cosine":
        raise ValueError(f"unsupported schedule kind {desc.get('kind')!r}")
    return cosine_schedule(int(desc["T"]), float(desc.get("s", 0.008)))


def _check_t(sched, t, lo=1):
    t = np.asarray(t)
    if np.any(t < lo) or np.any(t > sched.T):
        raise InvalidStep(f"timestep {t} outside [{lo}, {sched.T}]")


def _col(v, x):
    # per-sample coefficient broadcast against a (..., D) latent
    v = np.asarray(v, dtype=np.float64)
    return v[..., None] if v.ndim else v


def q_sample(sched, x0, t, eps):
    _check_t(sched, t)
    x0 = np.asarray(x0, dtype=np.float64)
    return _col(sched.sqrt_ab(t), x0) * x0 + _col(sched.sqrt_1mab(t), x0) * eps


def predict_x0(sched, x_t, t, eps_hat):
    _check_t(sched, t, lo=0)
    x_t = np.asarray(x_t, dtype=np.float64)
    return (x_t - _col(sched.sqrt_1mab(t), x_t) * eps_hat) / _col(sched.sqrt_ab(t), x_t)


def ddim_step(sched, x_t, t, t_prev, eps_hat, sigma=0.0, z=None):
    """One DDIM update from ``t`` down to ``t_prev``."""
    if not 0 <= t_prev < t <= sched.T:
        raise InvalidStep(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    x0 = predict_x0(sched, x_t, t, eps_hat)
    ab_prev = sched.alpha_bar[t_prev]
    dir_coef = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = np.sqrt(ab_prev) * x0 + dir_coef * eps_hat
    if sigma:
        out = out + sigma * (0.0 if z is None else z)
    return out


def ddim_invert_step(sched, x_t, t, t_next, eps_hat):
    """One deterministic DDIM inversion update from ``t`` up to ``t_next``."""
    if not 0 <= t < t_next <= sched.T:
        raise InvalidStep(f"need 0 <= t < t_next <= T, got t={t}, t_next={t_next}")
    x0 = predict_x0(sched, x_t, t, eps_hat)
    return sched.sqrt_ab(t_next) * x0 + sched.sqrt_1mab(t_next) * eps_hat


def score_from_noise(sched, eps_hat, t):
    _check_t(sched, t)
    return -np.asarray(eps_hat, dtype=np.float64) / _col(sched.sqrt_1mab(t), eps_hat)


def timestep_grid(tau, dt):
    """Ascending grid ``[0, dt, 2dt, ..., tau]``; the last interval may be shorter."""
    if not 0 < dt <= tau:
        raise InvalidStep(f"need 0 < dt <= tau, got dt={dt}, tau={tau}")
    grid = list(range(0, tau, dt))
    grid.append(tau)
    return grid


def ddim_invert(sched, eps_fn, x0, tau, dt):
    """Run inversion from ``t = 0`` to ``tau``; ``eps_fn(x, t)`` predicts noise."""
    x = np.asarray(x0, dtype=np.float64)
    grid = timestep_grid(tau, dt)
    for t, t_next in zip(grid[:-1], grid[1:]):
        x = ddim_invert_step(sched, x, t, t_next, eps_fn(x, t))
    return x


def ddim_sample(sched, eps_fn, x_tau, tau, dt):
    """Deterministic sampling from ``tau`` down to ``0`` on the same grid."""
    x = np.asarray(x_tau, dtype=np.float64)
    grid = timestep_grid(tau, dt)[::-1]
    for t, t_prev in zip(grid[:-1], grid[1:]):
        x = ddim_step(sched, x, t, t_prev, eps_fn(x, t))
    return x


def ddpm_sample_diagnostic(sched, eps_fn, shape, rng):
    """Ancestral DDPM sampling from pure noise; diagnostics only."""
    x = rng.standard_normal(shape)
    for t in range(sched.T, 0, -1):
        eps = eps_fn(x, t)
        zeta = sched.zeta[t - 1]
        mean = (x - zeta / sched.sqrt_1mab(t) * eps) / np.sqrt(1.0 - zeta)
        if t > 1:
            var = zeta * (1.0 - sched.alpha_bar[t - 1]) / (1.0 - sched.alpha_bar[t])
            x = mean + np.sqrt(var) * rng.standard_normal(shape)
        else:
            x = mean
    return x


def gaussian_eps(sched, mean, std):
    """Exact noise predictor for data distributed as ``N(mean, std^2 I)``."""
    mean = np.asarray(mean, dtype=np.float64)

    def eps_fn(x, t):
        ab = sched.alpha_bar[t]
        return np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * mean) / (ab * std**2 + 1.0 - ab)

    return eps_fn
