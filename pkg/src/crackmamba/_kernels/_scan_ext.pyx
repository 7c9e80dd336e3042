# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled selective-scan recurrence (forward and reverse pass).

Layout: sequences are ``[G, L, D]`` with ``G = batch * K``; group ``g`` uses
parameter set ``k = g % K``. ``A`` is ``[K, D, S]``, ``B``/``C`` are
``[G, L, S]``, the skip gain ``Dskip`` is ``[K, D]``.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expm1, fabs

cnp.import_array()

cdef double SERIES_CUTOFF = 1e-4


cdef inline double _phi(double z) noexcept nogil:
    # (e^z - 1) / z
    if fabs(z) < SERIES_CUTOFF:
        return 1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0))
    return expm1(z) / z


cdef inline double _dphi(double z, double a, double phi) noexcept nogil:
    if fabs(z) < SERIES_CUTOFF:
        return 0.5 + z * (1.0 / 3.0 + z * (0.125 + z / 30.0))
    return (a - phi) / z


def scan_forward(floating[:, :, ::1] u, floating[:, :, ::1] delta, floating[:, :, ::1] A,
                 floating[:, :, ::1] B, floating[:, :, ::1] C, floating[:, ::1] Dskip,
                 bint euler=False):
    cdef Py_ssize_t G = u.shape[0], L = u.shape[1], D = u.shape[2]
    cdef Py_ssize_t K = A.shape[0], S = A.shape[2]
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((G, L, D), dtype=dtype)
    h_arr = np.empty((G, L, D, S), dtype=dtype)
    cdef floating[:, :, ::1] y = y_arr
    cdef floating[:, :, :, ::1] hs = h_arr
    cdef Py_ssize_t g, k, t, d, n
    cdef double dt, z, a, bb, hprev, acc, ut
    with nogil:
        for g in range(G):
            k = g % K
            for d in range(D):
                for t in range(L):
                    dt = delta[g, t, d]
                    ut = u[g, t, d]
                    acc = Dskip[k, d] * ut
                    for n in range(S):
                        z = dt * A[k, d, n]
                        a = exp(z)
                        if euler:
                            bb = dt * B[g, t, n]
                        else:
                            bb = dt * _phi(z) * B[g, t, n]
                        hprev = hs[g, t - 1, d, n] if t > 0 else 0.0
                        hs[g, t, d, n] = a * hprev + bb * ut
                        acc = acc + C[g, t, n] * hs[g, t, d, n]
                    y[g, t, d] = acc
    return y_arr, h_arr


def scan_backward(floating[:, :, ::1] gy, floating[:, :, ::1] u, floating[:, :, ::1] delta,
                  floating[:, :, ::1] A, floating[:, :, ::1] B, floating[:, :, ::1] C,
                  floating[:, ::1] Dskip, floating[:, :, :, ::1] hs, bint euler=False):
    cdef Py_ssize_t G = u.shape[0], L = u.shape[1], D = u.shape[2]
    cdef Py_ssize_t K = A.shape[0], S = A.shape[2]
    dtype = np.float32 if floating is float else np.float64
    gu_arr = np.zeros((G, L, D), dtype=dtype)
    gdt_arr = np.zeros((G, L, D), dtype=dtype)
    gB_arr = np.zeros((G, L, S), dtype=dtype)
    gC_arr = np.zeros((G, L, S), dtype=dtype)
    gA_acc = np.zeros((K, D, S), dtype=np.float64)
    gD_acc = np.zeros((K, D), dtype=np.float64)
    gh_arr = np.zeros(S, dtype=np.float64)
    cdef floating[:, :, ::1] gu = gu_arr
    cdef floating[:, :, ::1] gdt = gdt_arr
    cdef floating[:, :, ::1] gB = gB_arr
    cdef floating[:, :, ::1] gC = gC_arr
    cdef double[:, :, ::1] gA = gA_acc
    cdef double[:, ::1] gD = gD_acc
    cdef double[::1] gh = gh_arr
    cdef Py_ssize_t g, k, t, d, n
    cdef double dt, z, a, phi, gyt, ut, An, Bn, hprev, ga, gbb, gu_acc, gdt_acc
    with nogil:
        for g in range(G):
            k = g % K
            for d in range(D):
                for n in range(S):
                    gh[n] = 0.0
                for t in range(L - 1, -1, -1):
                    gyt = gy[g, t, d]
                    ut = u[g, t, d]
                    dt = delta[g, t, d]
                    gu_acc = gyt * Dskip[k, d]
                    gdt_acc = 0.0
                    gD[k, d] += gyt * ut
                    for n in range(S):
                        An = A[k, d, n]
                        Bn = B[g, t, n]
                        z = dt * An
                        a = exp(z)
                        gh[n] += gyt * C[g, t, n]
                        gC[g, t, n] += gyt * hs[g, t, d, n]
                        hprev = hs[g, t - 1, d, n] if t > 0 else 0.0
                        ga = gh[n] * hprev
                        gbb = gh[n] * ut
                        if euler:
                            gu_acc = gu_acc + gh[n] * dt * Bn
                            gB[g, t, n] += gbb * dt
                            gdt_acc = gdt_acc + ga * a * An + gbb * Bn
                            gA[k, d, n] += ga * a * dt
                        else:
                            phi = _phi(z)
                            gu_acc = gu_acc + gh[n] * dt * phi * Bn
                            gB[g, t, n] += gbb * dt * phi
                            gdt_acc = gdt_acc + ga * a * An + gbb * Bn * a
                            gA[k, d, n] += ga * a * dt + gbb * Bn * dt * dt * _dphi(z, a, phi)
                        gh[n] = gh[n] * a
                    gu[g, t, d] = gu_acc
                    gdt[g, t, d] = gdt_acc
    return (gu_arr, gdt_arr, gA_acc.astype(dtype), gB_arr, gC_arr, gD_acc.astype(dtype))
