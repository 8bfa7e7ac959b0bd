# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kinematic kernels in ``_kernels_py``.

Signatures and array conventions are identical; inputs are coerced to
C-contiguous float64 by the dispatching wrappers in ``kernels``.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def chain(const long[::1] parents, const double[:, ::1] rest_joints, const double[:, :, :, ::1] R):
    cdef Py_ssize_t n = R.shape[0], J = R.shape[1]
    Rg_arr = np.empty((n, J, 3, 3))
    tg_arr = np.empty((n, J, 3))
    cdef double[:, :, :, ::1] Rg = Rg_arr
    cdef double[:, :, ::1] tg = tg_arr
    cdef Py_ssize_t b, j, p, i, k, l
    cdef double acc, d0, d1, d2
    with nogil:
        for b in range(n):
            for i in range(3):
                tg[b, 0, i] = rest_joints[0, i]
                for k in range(3):
                    Rg[b, 0, i, k] = R[b, 0, i, k]
            for j in range(1, J):
                p = parents[j]
                d0 = rest_joints[j, 0] - rest_joints[p, 0]
                d1 = rest_joints[j, 1] - rest_joints[p, 1]
                d2 = rest_joints[j, 2] - rest_joints[p, 2]
                for i in range(3):
                    for k in range(3):
                        acc = 0.0
                        for l in range(3):
                            acc = acc + Rg[b, p, i, l] * R[b, j, l, k]
                        Rg[b, j, i, k] = acc
                    tg[b, j, i] = Rg[b, p, i, 0] * d0 + Rg[b, p, i, 1] * d1 + Rg[b, p, i, 2] * d2 + tg[b, p, i]
    return Rg_arr, tg_arr


def regress_joints(const double[:, :, :, ::1] Rg, const double[:, :, ::1] tg,
                   const double[:, :, :, ::1] P, const double[:, ::1] s):
    cdef Py_ssize_t n = Rg.shape[0], J = Rg.shape[1], K = s.shape[0], nP = P.shape[0]
    out_arr = np.zeros((n, K, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, bp, k, j, a
    cdef double skj
    with nogil:
        for b in range(n):
            bp = b if nP > 1 else 0
            for k in range(K):
                for j in range(J):
                    skj = s[k, j]
                    for a in range(3):
                        out[b, k, a] += (Rg[b, j, a, 0] * P[bp, k, j, 0] + Rg[b, j, a, 1] * P[bp, k, j, 1]
                                         + Rg[b, j, a, 2] * P[bp, k, j, 2] + skj * tg[b, j, a])
    return out_arr


def pose_jacobian(const long[::1] parents, const double[:, :, :, ::1] Rg, const double[:, :, ::1] tg,
                  const double[:, :, :, ::1] P, const double[:, ::1] s,
                  const double[:, :, :, :, ::1] D):
    cdef Py_ssize_t n = Rg.shape[0], J = Rg.shape[1], K = s.shape[0], nP = P.shape[0]
    cdef Py_ssize_t q = D.shape[4]
    jac_arr = np.zeros((n, K, 3, J, q))
    cdef double[:, :, :, :, ::1] jac = jac_arr
    Y_arr = np.empty((J, 3))
    ssum_arr = np.empty(J)
    z_arr = np.empty(3)
    GD_arr = np.empty((3, q))
    cdef double[:, ::1] Y = Y_arr
    cdef double[::1] ssum = ssum_arr
    cdef double[::1] z = z_arr
    cdef double[:, ::1] GD = GD_arr
    cdef Py_ssize_t b, bp, k, j, m, p, a, i, c, e
    cdef double acc
    with nogil:
        for b in range(n):
            bp = b if nP > 1 else 0
            for k in range(K):
                # subtree sums of Rg_j P_kj + s_kj tg_j, accumulated leaf-to-root
                for j in range(J):
                    ssum[j] = s[k, j]
                    for a in range(3):
                        Y[j, a] = (Rg[b, j, a, 0] * P[bp, k, j, 0] + Rg[b, j, a, 1] * P[bp, k, j, 1]
                                   + Rg[b, j, a, 2] * P[bp, k, j, 2] + s[k, j] * tg[b, j, a])
                for j in range(J - 1, 0, -1):
                    p = parents[j]
                    ssum[p] += ssum[j]
                    for a in range(3):
                        Y[p, a] += Y[j, a]
                for m in range(J):
                    # z = Rg_m^T (Y_m - ssum_m tg_m)
                    for a in range(3):
                        acc = 0.0
                        for e in range(3):
                            acc = acc + Rg[b, m, e, a] * (Y[m, e] - ssum[m] * tg[b, m, e])
                        z[a] = acc
                    # contract z with D over the column index first
                    for a in range(3):
                        for c in range(q):
                            acc = 0.0
                            for e in range(3):
                                acc = acc + z[e] * D[b, m, a, e, c]
                            GD[a, c] = acc
                    p = parents[m]
                    for i in range(3):
                        for c in range(q):
                            if m == 0:
                                acc = GD[i, c]
                            else:
                                acc = 0.0
                                for a in range(3):
                                    acc = acc + Rg[b, p, i, a] * GD[a, c]
                            jac[b, k, i, m, c] = acc
    return jac_arr


def skin(const double[:, :, :, ::1] Rg, const double[:, :, ::1] tg, const double[:, ::1] rest_joints,
         const double[:, ::1] weights, const double[:, :, ::1] verts):
    cdef Py_ssize_t n = Rg.shape[0], J = Rg.shape[1], N = weights.shape[0]
    out_arr = np.zeros((n, N, 3))
    T_arr = np.empty((J, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] T = T_arr
    cdef Py_ssize_t b, i, j, a
    cdef double w, x0, x1, x2
    with nogil:
        for b in range(n):
            for j in range(J):
                for a in range(3):
                    T[j, a] = tg[b, j, a] - (Rg[b, j, a, 0] * rest_joints[j, 0] + Rg[b, j, a, 1] * rest_joints[j, 1]
                                             + Rg[b, j, a, 2] * rest_joints[j, 2])
            for i in range(N):
                x0 = verts[b, i, 0]
                x1 = verts[b, i, 1]
                x2 = verts[b, i, 2]
                for j in range(J):
                    w = weights[i, j]
                    if w == 0.0:
                        continue
                    for a in range(3):
                        out[b, i, a] += w * (Rg[b, j, a, 0] * x0 + Rg[b, j, a, 1] * x1 + Rg[b, j, a, 2] * x2 + T[j, a])
    return out_arr
