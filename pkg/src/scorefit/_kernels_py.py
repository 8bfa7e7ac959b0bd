"""Pure numpy implementations of the kinematic hot kernels.

Array conventions (``n`` = batch, ``J`` = joints, ``K`` = reported joints):

* ``parents``: ``(J,)`` int64, ``parents[0] == -1`` and ``parents[j] < j``
* ``R``/``Rg``: ``(n, J, 3, 3)`` local / global joint rotations
* ``tg``: ``(n, J, 3)`` global joint positions
* ``P``: ``(nP, K, J, 3)`` with ``nP in {1, n}``; skinning-regressed offsets
  ``sum_i W[k, i] w[i, j] (v_i - J_j)``
* ``s``: ``(K, J)`` with ``s[k, j] = sum_i W[k, i] w[i, j]``
"""
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def _subtree_matrix(parents):
    J = len(parents)
    S = np.eye(J)
    for j in range(J - 1, 0, -1):
        S[parents[j]] += S[j]
    return S


def chain(parents, rest_joints, R):
    n, J = R.shape[:2]
    Rg = np.empty_like(R)
    tg = np.empty((n, J, 3))
    Rg[:, 0] = R[:, 0]
    tg[:, 0] = rest_joints[0]
    for j in range(1, J):
        p = parents[j]
        Rg[:, j] = Rg[:, p] @ R[:, j]
        tg[:, j] = Rg[:, p] @ (rest_joints[j] - rest_joints[p]) + tg[:, p]
    return Rg, tg


def regress_joints(Rg, tg, P, s):
    return np.einsum("njab,nkjb->nka", Rg, np.broadcast_to(P, (Rg.shape[0],) + P.shape[1:])) + np.einsum(
        "kj,nja->nka", s, tg
    )


def pose_jacobian(parents, Rg, tg, P, s, D):
    """d joints / d local-rotation parameters, ``(n, K, 3, J, q)``.

    ``D`` is ``(n, J, 3, 3, q)``: the derivative of each local rotation
    w.r.t. its own parameters (``q = 6`` for the 6D map).
    """
    n = Rg.shape[0]
    S = _subtree_matrix(tuple(int(p) for p in parents))
    P = np.broadcast_to(P, (n,) + P.shape[1:])
    term = np.einsum("njab,nkjb->nkja", Rg, P) + s[None, :, :, None] * tg[:, None, :, :]
    Y = np.einsum("mj,nkja->nkma", S, term) - (s @ S.T)[None, :, :, None] * tg[:, None, :, :]
    z = np.einsum("nmba,nkmb->nkma", Rg, Y)
    Gp = np.empty_like(Rg)
    Gp[:, 0] = np.eye(3)
    Gp[:, 1:] = Rg[:, np.asarray(parents[1:])]
    return np.einsum("nmia,nkmb,nmabq->nkimq", Gp, z, D, optimize=True)


def skin(Rg, tg, rest_joints, weights, verts):
    # per-joint affine transforms, then blend per vertex
    t = tg - np.einsum("njab,jb->nja", Rg, rest_joints)
    A = np.einsum("ij,njab->niab", weights, Rg)
    b = weights @ t
    return np.einsum("niab,nib->nia", A, verts) + b
