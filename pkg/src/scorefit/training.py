"""Denoising-objective training with Adam and an EMA shadow copy."""
import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import denoiser as dn
from .diffusion import q_sample
from .errors import ConfigError, DimensionMismatch, NonFinite

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    iterations: int = 20000
    ema_rate: float = 0.995
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if min(self.batch_size, self.iterations, self.log_every) <= 0 or not self.learning_rate > 0:
            raise ConfigError("batch_size, learning_rate, iterations and log_every must be positive")
        if not 0 < self.ema_rate < 1:
            raise ConfigError(f"ema_rate must lie in (0, 1), got {self.ema_rate}")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(params.zeros_like(), params.zeros_like(), 0)


def loss_and_grads(params, sched, batch, rng):
    """Noise-prediction MSE on ``batch = (c, x0)`` and its parameter gradients.

    Timesteps are drawn uniformly from ``1..T`` per sample.
    """
    c, x0 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in batch)
    n, D = x0.shape
    if n == 0:
        raise DimensionMismatch("empty batch")
    if c.shape[0] != n:
        raise DimensionMismatch(f"{c.shape[0]} feature rows for {n} poses")
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal((n, D))
    xt = q_sample(sched, x0, t, eps)
    pred, cache = dn.forward(params, xt, t, c, return_cache=True)
    r = pred - eps
    loss = float(np.mean(r * r))
    grads, _, _ = dn.backward(params, cache, 2.0 * r / r.size)
    return loss, grads


def optimizer_step(state, params, grads, lr):
    """One bias-corrected Adam update; mutates ``params`` and ``state``."""
    state.step += 1
    b1c = 1.0 - ADAM_BETA1**state.step
    b2c = 1.0 - ADAM_BETA2**state.step
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        params.tensors[k] -= lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)
    return params


def ema_update(shadow, params, rate=0.995):
    for k, p in params.tensors.items():
        s = shadow.tensors[k]
        s *= rate
        s += (1.0 - rate) * p
    return shadow


def train(config, dataset, sched, params=None, callback=None):
    """Train on ``dataset = (c, x0)``; returns ``(params, ema_params, trace)``.

    ``trace`` holds ``(iteration, loss)`` for every iteration. The minibatch
    sampler and the noise draws use independent streams seeded from
    ``config.seed`` so runs are reproducible.
    """
    c_all, x_all = (np.asarray(a, dtype=np.float64) for a in dataset)
    if len(x_all) == 0:
        raise DimensionMismatch("empty dataset")
    init_rng, batch_rng, noise_rng = (np.random.default_rng([config.seed, i]) for i in range(3))
    if params is None:
        params = dn.init_params(init_rng, width=x_all.shape[1], d=c_all.shape[1])
    state = AdamState.zeros(params)
    ema = params.copy()
    trace = np.empty((config.iterations, 2))
    n = len(x_all)
    for it in range(config.iterations):
        idx = batch_rng.integers(0, n, size=min(config.batch_size, n)) if n > config.batch_size else np.arange(n)
        loss, grads = loss_and_grads(params, sched, (c_all[idx], x_all[idx]), noise_rng)
        if not np.isfinite(loss):
            raise NonFinite(f"training loss became {loss}", it)
        optimizer_step(state, params, grads, config.learning_rate)
        ema_update(ema, params, config.ema_rate)
        trace[it] = it, loss
        if callback is not None and (it + 1) % config.log_every == 0:
            callback(it + 1, float(trace[max(0, it + 1 - config.log_every) : it + 1, 1].mean()))
    meta = {
        "train": asdict(config),
        "adam": {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS},
        "schedule": sched.descriptor(),
        "target_normalization": "none",
    }
    params.meta.update(meta)
    ema.meta.update(meta)
    return params, ema, trace


def write_loss_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for it, loss in trace:
            w.writerow([int(it), repr(float(loss))])


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(a), float(b)] for a, b in rows]).reshape(-1, 2)


def smoothed(trace, window=100):
    loss = np.asarray(trace)[:, 1]
    n = len(loss) // window
    return loss[: n * window].reshape(n, window).mean(axis=1)
