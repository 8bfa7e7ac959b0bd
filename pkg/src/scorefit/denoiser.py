"""Conditional noise-prediction MLP with hand-written reverse mode.

Wiring, for ``i = 1..3`` (``h`` has the latent width, 144 for 24 joints)::

    h      = x W_in + b_in
    ts, tb = time_mlp_i(psi(t))
    h      = h + out_i(gelu(fuse_i([LN_i(h) * ts + tb, c])))
    eps    = h W_head + b_head

Every affine layer stores its weight as ``(fan_in, fan_out)``.
"""
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatError, ShapeMismatch

CHECKPOINT_VERSION = 1
LN_EPS = 1e-5
_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + 0.044715 * x**3)))


def gelu_grad(x):
    th = np.tanh(_GELU_K * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_K * (1.0 + 3 * 0.044715 * x**2)


def sinusoidal_embed(t, dim):
    """Interleaved ``[sin(w0 t), cos(w0 t), sin(w1 t), ...]`` with ``w_k`` from 1 down to 1e-4."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass
class DenoiserParams:
    tensors: dict
    width: int = 144
    d: int = 32
    emb_dim: int = 128
    n_blocks: int = 3
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self):
        return DenoiserParams(
            {k: v.copy() for k, v in self.tensors.items()},
            self.width, self.d, self.emb_dim, self.n_blocks, dict(self.meta),
        )

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def n_params(self):
        return sum(v.size for v in self.tensors.values())

    def expected_shapes(self):
        return param_shapes(self.width, self.d, self.emb_dim, self.n_blocks)


def param_shapes(width=144, d=32, emb_dim=128, n_blocks=3):
    shapes = {"in.W": (width, width), "in.b": (width,)}
    for i in range(n_blocks):
        p = f"blk{i}."
        shapes.update(
            {
                p + "ln.g": (width,),
                p + "ln.b": (width,),
                p + "time1.W": (emb_dim, width),
                p + "time1.b": (width,),
                p + "time2.W": (width, 2 * width),
                p + "time2.b": (2 * width,),
                p + "fuse.W": (width + d, width),
                p + "fuse.b": (width,),
                p + "out.W": (width, width),
                p + "out.b": (width,),
            }
        )
    shapes.update({"head.W": (width, width), "head.b": (width,)})
    return shapes


def init_params(rng, width=144, d=32, emb_dim=128, n_blocks=3):
    """Weights ~ N(0, 1/fan_in), zero biases, unit LN gains, zero head."""
    tensors = {}
    for name, shp in param_shapes(width, d, emb_dim, n_blocks).items():
        if name.endswith(".W") and not name.startswith("head"):
            tensors[name] = rng.standard_normal(shp) / np.sqrt(shp[0])
        elif name.endswith("ln.g"):
            tensors[name] = np.ones(shp)
        else:
            tensors[name] = np.zeros(shp)
    return DenoiserParams(tensors, width, d, emb_dim, n_blocks)


def _prepare(params, x, t, c):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    if x.shape[1] != params.width:
        raise DimensionMismatch(f"latent width {x.shape[1]} != model width {params.width}")
    c = np.asarray(c, dtype=np.float64)
    c = np.broadcast_to(c, (n, c.shape[-1])) if c.ndim == 1 else c
    if c.shape != (n, params.d):
        raise DimensionMismatch(f"features shape {c.shape}, expected ({n}, {params.d})")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    return single, x, t, c


def forward(params, x, t, c, return_cache=False):
    """Predict noise for latents ``x`` ``(n, width)`` or ``(width,)``."""
    single, x, t, c = _prepare(params, x, t, c)
    P = params.tensors
    w = params.width
    # time embedding is identical across the batch when t is constant
    t_unique, t_inv = np.unique(t, return_inverse=True)
    psi = sinusoidal_embed(t_unique, params.emb_dim)
    h = x @ P["in.W"] + P["in.b"]
    cache = {"x": x, "c": c, "psi": psi, "t_inv": t_inv, "blocks": []}
    for i in range(params.n_blocks):
        p = f"blk{i}."
        a1 = psi @ P[p + "time1.W"] + P[p + "time1.b"]
        g1 = gelu(a1)
        tst = (g1 @ P[p + "time2.W"] + P[p + "time2.b"])[t_inv]
        ts, tb = tst[:, :w], tst[:, w:]
        mu = h.mean(axis=1, keepdims=True)
        xc = h - mu
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
        u = xc * rstd
        ln = u * P[p + "ln.g"] + P[p + "ln.b"]
        z = np.concatenate([ln * ts + tb, c], axis=1)
        a = z @ P[p + "fuse.W"] + P[p + "fuse.b"]
        ga = gelu(a)
        o = ga @ P[p + "out.W"] + P[p + "out.b"]
        if return_cache:
            cache["blocks"].append((h, a1, g1, ts, tb, u, rstd, ln, z, a, ga))
        h = h + o
    out = h @ P["head.W"] + P["head.b"]
    cache["h_final"] = h
    if single:
        out = out[0]
    return (out, cache) if return_cache else out


def backward(params, cache, d_out):
    """Reverse pass. Returns ``(grads, d_x, d_c)``; ``grads`` keyed like the params."""
    P = params.tensors
    w = params.width
    d_out = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
    x, c, psi, t_inv = cache["x"], cache["c"], cache["psi"], cache["t_inv"]
    if d_out.shape != x.shape:
        raise DimensionMismatch(f"upstream gradient shape {d_out.shape} != {x.shape}")
    grads = {}
    h = cache["h_final"]
    grads["head.W"] = h.T @ d_out
    grads["head.b"] = d_out.sum(axis=0)
    dh = d_out @ P["head.W"].T
    dc = np.zeros_like(c)
    n_unique = psi.shape[0]
    for i in reversed(range(params.n_blocks)):
        p = f"blk{i}."
        h, a1, g1, ts, tb, u, rstd, ln, z, a, ga = cache["blocks"][i]
        grads[p + "out.W"] = ga.T @ dh
        grads[p + "out.b"] = dh.sum(axis=0)
        da = (dh @ P[p + "out.W"].T) * gelu_grad(a)
        grads[p + "fuse.W"] = z.T @ da
        grads[p + "fuse.b"] = da.sum(axis=0)
        dz = da @ P[p + "fuse.W"].T
        dht = dz[:, :w]
        dc += dz[:, w:]
        dtst = np.concatenate([dht * ln, dht], axis=1)
        dtst_u = np.zeros((n_unique, 2 * w))
        np.add.at(dtst_u, t_inv, dtst)
        grads[p + "time2.W"] = g1.T @ dtst_u
        grads[p + "time2.b"] = dtst_u.sum(axis=0)
        da1 = (dtst_u @ P[p + "time2.W"].T) * gelu_grad(a1)
        grads[p + "time1.W"] = psi.T @ da1
        grads[p + "time1.b"] = da1.sum(axis=0)
        dln = dht * ts
        grads[p + "ln.g"] = (dln * u).sum(axis=0)
        grads[p + "ln.b"] = dln.sum(axis=0)
        du = dln * P[p + "ln.g"]
        dh = dh + rstd * (du - du.mean(axis=1, keepdims=True) - u * (du * u).mean(axis=1, keepdims=True))
    grads["in.W"] = x.T @ dh
    grads["in.b"] = dh.sum(axis=0)
    dx = dh @ P["in.W"].T
    return grads, dx, dc


def grad_input(params, x, t, c, d_out):
    """Convenience wrapper: forward + backward from scratch."""
    _, cache = forward(params, x, t, c, return_cache=True)
    return backward(params, cache, d_out)


class NoisePredictor:
    """Binds params and features into the ``eps_fn(x, t)`` form used by samplers."""

    def __init__(self, params, c):
        self.params = params
        self.c = np.asarray(c, dtype=np.float64)

    def __call__(self, x, t):
        return forward(self.params, x, t, self.c)


# ---------------------------------------------------------------- checkpoints


def checkpoint_save(params, path, extra_meta=None):
    meta = dict(params.meta)
    meta.update(extra_meta or {})
    meta.update(
        {
            "format_version": CHECKPOINT_VERSION,
            "width": params.width,
            "d": params.d,
            "emb_dim": params.emb_dim,
            "n_blocks": params.n_blocks,
            "dtype": "<f8",
            "tensors": {k: list(v.shape) for k, v in params.tensors.items()},
        }
    )
    buf = io.BytesIO()
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in params.tensors.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())
    return path


def checkpoint_load(path, d=None):
    """Load a checkpoint; ``d`` (if given) must match the declared feature width."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            data = {k: npz[k] for k in npz.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint: {exc}") from exc
    if "__meta__" not in data:
        raise FormatError(f"{path}: missing __meta__ record")
    try:
        meta = json.loads(data.pop("__meta__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {meta.get('format_version')!r}")
    dims = {k: int(meta[k]) for k in ("width", "d", "emb_dim", "n_blocks") if k in meta}
    if len(dims) != 4:
        raise FormatError(f"{path}: metadata lacks width/d/emb_dim/n_blocks")
    declared_d = dims["d"]
    if d is not None:
        dims["d"] = int(d)
    expected = param_shapes(**dims)
    missing = set(expected) - set(data)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)}")
    for name, shp in expected.items():
        if data[name].shape != tuple(shp):
            raise ShapeMismatch(
                f"{path}: tensor {name} has shape {data[name].shape}, expected {tuple(shp)} for d={dims['d']}"
                + (f" (file declares d={declared_d})" if d is not None else "")
            )
        if data[name].dtype != np.dtype("<f8"):
            raise FormatError(f"{path}: tensor {name} has dtype {data[name].dtype}, expected <f8")
    tensors = {k: data[k].astype(np.float64) for k in expected}
    for k in ("format_version", "width", "d", "emb_dim", "n_blocks", "dtype", "tensors"):
        meta.pop(k, None)
    return DenoiserParams(tensors, meta=meta, **dims)
