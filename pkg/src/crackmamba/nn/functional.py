"""Differentiable tensor ops.

Binary elementwise ops broadcast only across size-1 axes of operands with the
same rank; anything else is rejected rather than silently expanded.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from .tensor import Tensor, as_tensor, record


def _lift(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b), dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a), dtype=b.dtype)
    if a.ndim and b.ndim:
        if a.ndim != b.ndim:
            raise InvalidArgument(f"rank mismatch {a.shape} vs {b.shape}")
        for da, db in zip(a.shape, b.shape):
            if da != db and da != 1 and db != 1:
                raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if not shape:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return record(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``np.matmul`` semantics (batch axes broadcast); both operands need rank >= 2."""
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidArgument("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidArgument(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

    return record(a.data @ b.data, (a, b), backward)


def _sum_to(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return _unbroadcast(g, shape)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise InvalidArgument(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record(out, parents, backward)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axes, keepdims), 1.0 / count)


def amax(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Maximum; on ties the gradient is split evenly among the maximisers."""
    axes = _norm_axis(axis, x.ndim)
    m = x.data.max(axis=axes, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        hit = x.data == m
        return (hit * (g / hit.sum(axis=axes, keepdims=True).astype(x.dtype)),)

    out = m if keepdims else np.squeeze(m, axis=axes)
    return record(np.asarray(out, dtype=x.dtype), (x,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (g.transpose(inv),))


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing only."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (isinstance(k, (int, slice)) or k is Ellipsis or k is None):
            raise InvalidArgument("only basic slicing is differentiable")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return record(np.ascontiguousarray(x.data[key]), (x,), backward)


def take(x: Tensor, index, axis: int = -1, inverse=None) -> Tensor:
    """Gather ``x`` along ``axis`` at ``index``.

    ``inverse``, when given, must be the inverse permutation of ``index``;
    it turns the backward scatter into a second gather.
    """
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim

    def backward(g):
        if inverse is not None:
            return (np.take(g, inverse, axis=axis),)
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (gx,)

    return record(np.take(x.data, index, axis=axis), (x,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise InvalidArgument(f"concat shape mismatch {ref.shape} vs {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise InvalidArgument(f"stack shape mismatch {shape} vs {t.shape}")
    axis = axis % (len(shape) + 1)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------- pointwise

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(v):
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return record(out, (x,), lambda g: (g * (s + out * (1 - s)),))


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    return record(out.astype(v.dtype, copy=False), (x,), lambda g: (g * _sigmoid(v),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record(p, (x,), backward)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), backward)


# ---------------------------------------------------------------- normalisation

def layer_norm(x: Tensor, gain: Tensor | None, offset: Tensor | None,
               axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalise over ``axis`` (the channel axis), then apply a per-channel affine."""
    axis = axis % x.ndim
    c = x.shape[axis]
    bshape = [1] * x.ndim
    bshape[axis] = c
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gw = gain.data.reshape(bshape) if gain is not None else None
    out = xhat * gw if gw is not None else xhat
    if offset is not None:
        out = out + offset.data.reshape(bshape)
    parents = [x]
    if gain is not None:
        parents.append(gain)
    if offset is not None:
        parents.append(offset)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gh = g * gw if gw is not None else g
        gx = rstd * (gh - gh.mean(axis=axis, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=red).reshape(gain.shape))
        if offset is not None:
            grads.append(g.sum(axis=red).reshape(offset.shape))
        return grads

    return record(out.astype(x.dtype, copy=False), parents, backward)


# ---------------------------------------------------------------- convolution

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, groups: int = 1) -> Tensor:
    """Cross-correlation over NCHW input with an (Cout, Cin/groups, kh, kw) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidArgument("conv2d expects NCHW input and a 4-d kernel")
    n, cin, h, w = x.shape
    cout, cpg, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if cin % groups or cout % groups or cin // groups != cpg:
        raise InvalidArgument(
            f"conv2d channel mismatch: input {cin}, kernel {weight.shape}, groups {groups}")
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh or wp < kw:
        raise InvalidArgument("conv2d kernel larger than padded input")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data

    # cols[n, c, i, j, y, x] = xp[n, c, y*sh + i, x*sw + j]
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    cols = cols.reshape(n, groups, cpg * kh * kw, ho * wo)
    wmat = weight.data.reshape(groups, cout // groups, cpg * kh * kw)
    out = (wmat[None] @ cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g4 = g.reshape(n, groups, cout // groups, ho * wo)
        gw = (g4 @ np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
        gcols = (np.swapaxes(wmat, -1, -2)[None] @ g4).reshape(n, cin, kh, kw, ho, wo)
        gxp = np.zeros((n, cin, hp, wp), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph:ph + h, pw:pw + w]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return record(out, parents, backward)


# ---------------------------------------------------------------- resampling

def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    # half-pixel centres (align_corners=False), edge-clamped
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise InvalidArgument("upsample_bilinear expects NCHW input")
    uh = _bilinear_matrix(x.shape[2], factor, x.dtype)
    uw = _bilinear_matrix(x.shape[3], factor, x.dtype)
    out = uh @ x.data @ uw.T
    return record(out, (x,), lambda g: (uh.T @ g @ uw,))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise InvalidArgument("upsample_nearest expects NCHW input")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record(out, (x,), backward)


# ---------------------------------------------------------------- pooling

def _check_map(x):
    if x.ndim != 4:
        raise InvalidArgument(f"expected an NCHW map, got shape {x.shape}")


def global_max_pool(x: Tensor) -> Tensor:
    _check_map(x)
    return amax(x, axis=(2, 3), keepdims=True)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_map(x)
    return mean(x, axis=(2, 3), keepdims=True)


def channel_max(x: Tensor) -> Tensor:
    _check_map(x)
    return amax(x, axis=1, keepdims=True)


def channel_mean(x: Tensor) -> Tensor:
    _check_map(x)
    return mean(x, axis=1, keepdims=True)


# ---------------------------------------------------------------- regularisation

def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Per-sample stochastic depth: drop the whole branch, rescale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise InvalidArgument(f"drop-path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype) / (1.0 - rate)
    keep = keep.reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    return mul(x, Tensor(keep, dtype=x.dtype))


def constant_like(x: Tensor, value) -> Tensor:
    return as_tensor(np.full(x.shape, value, dtype=x.dtype))
