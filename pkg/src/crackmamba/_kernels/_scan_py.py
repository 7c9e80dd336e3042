"""Numpy reference for the selective-scan recurrence.

Same layout and semantics as the compiled ``_scan_ext``; the time loop is in
Python, everything inside a step is vectorised over (G, D, S).
"""
import numpy as np

SERIES_CUTOFF = 1e-4


def phi(z):
    """(e^z - 1) / z with a cubic series near zero."""
    z = np.asarray(z)
    small = np.abs(z) < SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    series = 1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0))
    return np.where(small, series, np.expm1(safe) / safe)


def dphi(z, a, ph):
    z = np.asarray(z)
    small = np.abs(z) < SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    series = 0.5 + z * (1.0 / 3.0 + z * (0.125 + z / 30.0))
    return np.where(small, series, (a - ph) / safe)


def _discretise(u, delta, A, B, euler):
    G, L, D = u.shape
    K, _, S = A.shape
    Ag = np.tile(A, (G // K, 1, 1))                 # [G, D, S]
    z = delta[..., None].astype(np.float64) * Ag[:, None]  # [G, L, D, S]
    a = np.exp(z)
    ph = np.ones_like(z) if euler else phi(z)
    return Ag, z, a, ph


def scan_forward(u, delta, A, B, C, Dskip, euler=False):
    G, L, D = u.shape
    K, _, S = A.shape
    _, z, a, ph = _discretise(u, delta, A, B, euler)
    bbu = delta[..., None] * ph * B[:, :, None, :] * u[..., None]   # [G, L, D, S]
    hs = np.empty((G, L, D, S), dtype=np.float64)
    h = np.zeros((G, D, S))
    for t in range(L):
        h = a[:, t] * h + bbu[:, t]
        hs[:, t] = h
    y = np.einsum("gtdn,gtn->gtd", hs, C) + u * np.tile(Dskip, (G // K, 1))[:, None]
    return y.astype(u.dtype), hs.astype(u.dtype)


def scan_backward(gy, u, delta, A, B, C, Dskip, hs, euler=False):
    G, L, D = u.shape
    K, _, S = A.shape
    Ag, z, a, ph = _discretise(u, delta, A, B, euler)
    hs = hs.astype(np.float64)
    gy64 = gy.astype(np.float64)
    gC = np.einsum("gtd,gtdn->gtn", gy64, hs)
    ghs = np.empty_like(hs)
    gh = np.zeros((G, D, S))
    for t in range(L - 1, -1, -1):
        gh = gh + gy64[:, t, :, None] * C[:, t, None, :]
        ghs[:, t] = gh
        gh = gh * a[:, t]
    hprev = np.concatenate([np.zeros((G, 1, D, S)), hs[:, :-1]], axis=1)
    ga = ghs * hprev
    gbb = ghs * u[..., None]
    Bt = B[:, :, None, :]
    dt = delta[..., None].astype(np.float64)
    Dg = np.tile(Dskip, (G // K, 1))
    gu = (ghs * dt * ph * Bt).sum(-1) + gy64 * Dg[:, None]
    gB = (gbb * dt * ph).sum(2)
    if euler:
        gdt = (ga * a * Ag[:, None] + gbb * Bt).sum(-1)
        gAg = (ga * a * dt).sum(1)
    else:
        gdt = (ga * a * Ag[:, None] + gbb * Bt * a).sum(-1)
        gAg = (ga * a * dt + gbb * Bt * dt * dt * dphi(z, a, ph)).sum(1)
    gA = gAg.reshape(G // K, K, D, S).sum(0)
    gD = (gy64 * u).sum(1).reshape(G // K, K, D).sum(0)
    dtype = u.dtype
    return (gu.astype(dtype), gdt.astype(dtype), gA.astype(dtype),
            gB.astype(dtype), gC.astype(dtype), gD.astype(dtype))
