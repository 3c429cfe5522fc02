# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled GRU sequence recurrence.

Same contract and math as budbreak.kernels.reference; the time loop runs in C
with BLAS dgemm for the hidden-side products, which removes the per-step
interpreter overhead that dominates the pure-NumPy version.
"""

import numpy as np

from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm


cdef inline double _sig(double v) nogil:
    cdef double e
    if v >= 0.0:
        return 1.0 / (1.0 + exp(-v))
    e = exp(v)
    return e / (1.0 + e)


def gru_sequence_forward(double[:, :, ::1] xg, double[:, ::1] u,
                         double[::1] b_hn, double[:, ::1] h0):
    cdef int B = xg.shape[0]
    cdef int H = xg.shape[1]
    cdef int h = xg.shape[2] // 3
    cdef int th = 3 * h

    hs_arr = np.empty((B, H, h))
    zs_arr = np.empty((B, H, h))
    rs_arr = np.empty((B, H, h))
    ms_arr = np.empty((B, H, h))
    ns_arr = np.empty((B, H, h))
    p_arr = np.empty((B, th))

    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] zs = zs_arr
    cdef double[:, :, ::1] rs = rs_arr
    cdef double[:, :, ::1] ms = ms_arr
    cdef double[:, :, ::1] ns = ns_arr
    cdef double[:, ::1] p = p_arr

    cdef char tT = b'T'
    cdef char tN = b'N'
    cdef double one = 1.0
    cdef double zero = 0.0
    cdef int t, b, j
    cdef int ld_hp
    cdef double *hp
    cdef double zv, rv, mv, nv, hpv

    with nogil:
        for t in range(H):
            if t == 0:
                hp = &h0[0, 0]
                ld_hp = h
            else:
                hp = &hs[0, t - 1, 0]
                ld_hp = H * h
            # p = h_prev @ u.T
            dgemm(&tT, &tN, &th, &B, &h, &one, &u[0, 0], &h, hp, &ld_hp,
                  &zero, &p[0, 0], &th)
            for b in range(B):
                hpv = 0.0
                for j in range(h):
                    if t == 0:
                        hpv = h0[b, j]
                    else:
                        hpv = hs[b, t - 1, j]
                    zv = _sig(xg[b, t, j] + p[b, j])
                    rv = _sig(xg[b, t, h + j] + p[b, h + j])
                    mv = p[b, 2 * h + j] + b_hn[j]
                    nv = tanh(xg[b, t, 2 * h + j] + rv * mv)
                    zs[b, t, j] = zv
                    rs[b, t, j] = rv
                    ms[b, t, j] = mv
                    ns[b, t, j] = nv
                    hs[b, t, j] = (1.0 - zv) * nv + zv * hpv
    return hs_arr, zs_arr, rs_arr, ms_arr, ns_arr


def gru_sequence_backward(double[:, ::1] u, double[::1] b_hn, double[:, ::1] h0,
                          double[:, :, ::1] hs, double[:, :, ::1] zs,
                          double[:, :, ::1] rs, double[:, :, ::1] ms,
                          double[:, :, ::1] ns, double[:, :, ::1] d_hs):
    cdef int B = hs.shape[0]
    cdef int H = hs.shape[1]
    cdef int h = hs.shape[2]
    cdef int th = 3 * h

    d_xg_arr = np.empty((B, H, th))
    d_u_arr = np.zeros((th, h))
    d_bhn_arr = np.zeros(h)
    carry_arr = np.zeros((B, h))
    dp_arr = np.empty((B, th))

    cdef double[:, :, ::1] d_xg = d_xg_arr
    cdef double[:, ::1] d_u = d_u_arr
    cdef double[::1] d_bhn = d_bhn_arr
    cdef double[:, ::1] carry = carry_arr
    cdef double[:, ::1] dp = dp_arr

    cdef char tT = b'T'
    cdef char tN = b'N'
    cdef double one = 1.0
    cdef int t, b, j
    cdef int ld_hp
    cdef double *hp
    cdef double dht, zv, rv, mv, nv, hpv, dn, dz, dan, dr, dm, daz, dar

    with nogil:
        for t in range(H - 1, -1, -1):
            if t == 0:
                hp = &h0[0, 0]
                ld_hp = h
            else:
                hp = &hs[0, t - 1, 0]
                ld_hp = H * h
            for b in range(B):
                for j in range(h):
                    dht = d_hs[b, t, j] + carry[b, j]
                    zv = zs[b, t, j]
                    rv = rs[b, t, j]
                    mv = ms[b, t, j]
                    nv = ns[b, t, j]
                    if t == 0:
                        hpv = h0[b, j]
                    else:
                        hpv = hs[b, t - 1, j]
                    dn = dht * (1.0 - zv)
                    dz = dht * (hpv - nv)
                    dan = dn * (1.0 - nv * nv)
                    dr = dan * mv
                    dm = dan * rv
                    daz = dz * zv * (1.0 - zv)
                    dar = dr * rv * (1.0 - rv)
                    d_xg[b, t, j] = daz
                    d_xg[b, t, h + j] = dar
                    d_xg[b, t, 2 * h + j] = dan
                    dp[b, j] = daz
                    dp[b, h + j] = dar
                    dp[b, 2 * h + j] = dm
                    d_bhn[j] += dm
                    carry[b, j] = dht * zv
            # carry += dp @ u
            dgemm(&tN, &tN, &h, &B, &th, &one, &u[0, 0], &h, &dp[0, 0], &th,
                  &one, &carry[0, 0], &h)
            # d_u += dp.T @ h_prev
            dgemm(&tN, &tT, &h, &th, &B, &one, hp, &ld_hp, &dp[0, 0], &th,
                  &one, &d_u[0, 0], &h)
    return d_xg_arr, d_u_arr, d_bhn_arr, carry_arr
