"""State-space sequence core.

Continuous system h' = A h + B x, y = C h with diagonal A, discretised by
zero-order hold. The LTI helpers (:func:`ssm_recurrence`, :func:`ssm_kernel`,
:func:`ssm_conv_apply`) work on plain numpy arrays; :func:`selective_scan`
is the input-dependent variant used inside the vision blocks and is
differentiable.
"""
from __future__ import annotations

import math

import numpy as np

from . import _kernels
from .errors import InvalidArgument, InvalidMode, NumericFault
from .nn import functional as F
from .nn.layers import Module, Parameter
from .nn.tensor import Tensor, record

SERIES_CUTOFF = 1e-4


def zoh_discretize(delta, A, B, euler: bool = False):
    """Zero-order-hold discretisation, elementwise.

    Returns ``(A_bar, B_bar)`` with ``A_bar = exp(delta*A)`` and
    ``B_bar = (exp(delta*A) - 1) / A * B``; near ``delta*A = 0`` the factor is
    evaluated as ``delta * (1 + z/2 + z^2/6 + z^3/24)``. ``euler=True`` gives
    the first-order shortcut ``B_bar = delta * B`` instead.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0) or not np.all(np.isfinite(delta)):
        raise InvalidArgument("step size delta must be positive and finite")
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    z = delta * A
    A_bar = np.exp(z)
    if euler:
        B_bar = delta * B
    else:
        B_bar = delta * _kernels.python_backend.phi(z) * B
    if A_bar.ndim == 0:
        return float(A_bar), float(B_bar)
    return A_bar, B_bar


def _per_step(p, L, S):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0:
        p = p.reshape(1)
    if p.ndim == 1:
        if p.shape[0] != S:
            raise InvalidArgument(f"expected {S} state entries, got {p.shape[0]}")
        return np.broadcast_to(p, (L, S))
    if p.shape != (L, S):
        raise InvalidArgument(f"expected per-step shape ({L}, {S}), got {p.shape}")
    return p


def ssm_recurrence(A_bar, B_bar, C, x, D=None) -> np.ndarray:
    """Run h(t) = A_bar(t) h(t-1) + B_bar(t) x(t), y(t) = C(t) h(t) [+ D x(t)] from h = 0.

    Parameters are scalars, ``[S]`` vectors (time-invariant) or ``[L, S]``
    arrays (one row per step).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgument("x must be a 1-d sequence")
    L = x.shape[0]
    S = max(np.asarray(p).shape[-1] if np.ndim(p) else 1 for p in (A_bar, B_bar, C))
    a, b, c = (_per_step(p, L, S) for p in (A_bar, B_bar, C))
    h = np.zeros(S)
    y = np.empty(L)
    for t in range(L):
        h = a[t] * h + b[t] * x[t]
        y[t] = c[t] @ h
    if D is not None:
        y = y + D * x
    return y


def ssm_kernel(A_bar, B_bar, C, L: int) -> np.ndarray:
    """Convolution kernel (C B, C A B, ..., C A^{L-1} B), summed over state dims."""
    params = [np.asarray(p, dtype=np.float64) for p in (A_bar, B_bar, C)]
    if any(p.ndim > 1 for p in params):
        raise InvalidMode("ssm_kernel needs time-invariant parameters; use ssm_recurrence")
    a, b, c = (np.atleast_1d(p) for p in params)
    if not (a.shape == b.shape == c.shape):
        raise InvalidArgument("A_bar, B_bar and C must share the state dimension")
    powers = a[None, :] ** np.arange(L)[:, None]
    return powers @ (c * b)


def ssm_conv_apply(x, kernel) -> np.ndarray:
    """Causal convolution y(t) = sum_{tau <= t} kernel(tau) x(t - tau)."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.shape != kernel.shape or x.ndim != 1:
        raise InvalidArgument(f"sequence and kernel lengths differ: {x.shape} vs {kernel.shape}")
    return np.convolve(x, kernel)[: x.shape[0]]


# ---------------------------------------------------------------- selective scan

def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


class SSMParams(Module):
    """Selective-SSM parameters for ``groups`` independent scan directions.

    A is stored as ``log(-A)`` so it stays strictly negative. B, C and the
    step size are linear functions of the current token; the step size goes
    through softplus, so it is always positive.
    """

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator,
                 groups: int = 1, dt_min: float = 0.01, dt_max: float = 0.1):
        D, S, K = channels, state_dim, groups
        bound = 1.0 / math.sqrt(D)
        self.A_log = Parameter(np.tile(np.log(np.arange(1, S + 1, dtype=np.float64)), (K, D, 1)))
        self.B_proj = Parameter(rng.uniform(-bound, bound, (K, D, S)))
        self.C_proj = Parameter(rng.uniform(-bound, bound, (K, D, S)))
        self.dt_proj = Parameter(rng.uniform(-bound, bound, (K, D, D)))
        dt0 = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), (K, D)))
        self.dt_bias = Parameter(softplus_inverse(dt0))
        self.D = Parameter(np.ones((K, D)))
        self.groups, self.channels, self.state_dim = K, D, S

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log.data)


def scan_core(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, Dskip: Tensor,
              euler: bool = False) -> Tensor:
    """Differentiable recurrence over ``[N, K, L, D]`` sequences.

    ``delta`` matches ``u``; ``A`` is ``[K, D, S]``; ``B``/``C`` are
    ``[N, K, L, S]``; ``Dskip`` is ``[K, D]``.
    """
    n, k, L, d = u.shape
    s = A.shape[-1]
    dt = u.dtype
    flat = lambda t, last: np.ascontiguousarray(t.data.reshape(n * k, L, last), dtype=dt)  # noqa: E731
    uu, dd, bb, cc = flat(u, d), flat(delta, d), flat(B, s), flat(C, s)
    aa = np.ascontiguousarray(A.data, dtype=dt)
    dk = np.ascontiguousarray(Dskip.data, dtype=dt)
    y, hs = _kernels.scan_forward(uu, dd, aa, bb, cc, dk, euler)

    def backward(g):
        gy = np.ascontiguousarray(g.reshape(n * k, L, d), dtype=dt)
        gu, gdt, gA, gB, gC, gD = _kernels.scan_backward(gy, uu, dd, aa, bb, cc, dk, hs, euler)
        return (gu.reshape(u.shape), gdt.reshape(u.shape), gA,
                gB.reshape(B.shape), gC.reshape(C.shape), gD)

    return record(y.reshape(n, k, L, d), (u, delta, A, B, C, Dskip), backward)


def _first_bad_step(arr: np.ndarray, time_axis: int) -> int:
    bad = ~np.isfinite(arr)
    other = tuple(i for i in range(arr.ndim) if i != time_axis)
    return int(np.argmax(bad.any(axis=other)))


def selective_scan(tokens: Tensor, params: SSMParams, euler: bool = False) -> Tensor:
    """Input-dependent scan of ``tokens`` (``[..., L, D]``).

    For ``groups = K > 1`` the tokens must be ``[N, K, L, D]``, one sequence
    per parameter group. Raises :class:`NumericFault` naming the first step
    with a non-finite value.
    """
    orig_shape = tokens.shape
    K = params.groups
    if tokens.shape[-1] != params.channels:
        raise InvalidArgument(f"expected {params.channels} channels, got {tokens.shape}")
    if K > 1:
        if tokens.ndim != 4 or tokens.shape[1] != K:
            raise InvalidArgument(f"expected [N,{K},L,D] tokens, got {list(tokens.shape)}")
        x = tokens
    else:
        L, D = tokens.shape[-2:]
        x = tokens.reshape(-1, 1, L, D)
    if not np.all(np.isfinite(x.data)):
        t = _first_bad_step(x.data, 2)
        raise NumericFault(f"non-finite token at scan step {t}", where=t)

    dt_w = F.transpose(params.dt_proj, (0, 2, 1))
    bias = params.dt_bias.reshape(1, K, 1, params.channels)
    delta = F.softplus(F.add(F.matmul(x, dt_w), bias))
    B = F.matmul(x, params.B_proj)
    C = F.matmul(x, params.C_proj)
    A = F.mul(F.exp(params.A_log), -1.0)
    y = scan_core(x, delta, A, B, C, params.D, euler)
    if not np.all(np.isfinite(y.data)):
        t = _first_bad_step(y.data, 2)
        raise NumericFault(f"non-finite scan output at step {t}", where=t)
    return y.reshape(orig_shape)
