"""Backend selection for the kinematic kernels.

The compiled extension is used when it was built and ``SCOREFIT_PURE_PYTHON``
is unset; otherwise the numpy implementation is used. Both backends expose
``chain``, ``regress_joints``, ``pose_jacobian`` and ``skin`` with identical
semantics (see ``_kernels_py`` for array conventions).
"""
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("SCOREFIT_PURE_PYTHON"):
        raise ImportError("pure python backend requested")
    from . import _kernels_ext
except ImportError:
    _kernels_ext = None

BACKENDS = {"python": _kernels_py}
if _kernels_ext is not None:
    BACKENDS["compiled"] = _kernels_ext

BACKEND = "compiled" if _kernels_ext is not None else "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


class Kernels:
    """Thin dispatcher that normalizes dtypes/contiguity for one backend."""

    def __init__(self, name=None):
        name = name or BACKEND
        if name not in BACKENDS:
            raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
        self.name = name
        self._mod = BACKENDS[name]

    def chain(self, parents, rest_joints, R):
        return self._mod.chain(np.ascontiguousarray(parents, dtype=np.int64), _c(rest_joints), _c(R))

    def regress_joints(self, Rg, tg, P, s):
        return self._mod.regress_joints(_c(Rg), _c(tg), _c(P), _c(s))

    def pose_jacobian(self, parents, Rg, tg, P, s, D):
        return self._mod.pose_jacobian(
            np.ascontiguousarray(parents, dtype=np.int64), _c(Rg), _c(tg), _c(P), _c(s), _c(D)
        )

    def skin(self, Rg, tg, rest_joints, weights, verts):
        return self._mod.skin(_c(Rg), _c(tg), _c(rest_joints), _c(weights), _c(verts))


default = Kernels()


def set_backend(name):
    """Switch the process-wide default backend; returns the previous name."""
    global default
    prev = default.name
    default = Kernels(name)
    return prev


def get():
    return default
