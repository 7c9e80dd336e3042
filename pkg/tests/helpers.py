"""Central finite-difference gradient checks for the tape (64-bit only)."""
import numpy as np

from crackmamba.nn import Tensor, no_grad
from crackmamba.nn import functional as F


def rel_error(a, b):
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


KINK_RATIO = 0.05       # one-sided slopes differing by more than this fraction flag a kink
MAX_KINK_SHARE = 0.10   # more skipped probes than this fails the check outright
ROUNDOFF_ULPS = 16      # measured spread of up - down on the tiny model, in ulps of the loss
RESOLVE_FACTOR = 1e4    # gradient / round-off floor needed to measure a 1e-4 error


class Report:
    """Outcome of a finite-difference sweep."""

    def __init__(self):
        self.worst, self.worst_name = 0.0, None
        self.analytic, self.numeric = [], []
        self.checked, self.unresolved = [], []

    @property
    def pooled(self):
        return rel_error(np.concatenate(self.analytic), np.concatenate(self.numeric))

    @property
    def error(self):
        return max(self.worst, self.pooled)


def _probe(loss, arrays, analytic, eps, max_coords, rng, steps=None, names=None, resolve=False):
    """Central differences per coordinate; returns a :class:`Report`.

    A coordinate whose forward and backward one-sided slopes disagree sharply
    sits within ``eps`` of a ReLU/max kink, where a central difference is not
    an estimate of the derivative; such probes are skipped and counted.

    With ``resolve`` an array only enters the per-array maximum when its
    gradient stands ``RESOLVE_FACTOR`` above the round-off floor of the
    difference quotient; every probe still counts in the pooled error.
    """
    rep, probes, kinks = Report(), 0, 0
    with no_grad():
        f0 = loss().item()
    for k, (arr, g) in enumerate(zip(arrays, analytic)):
        eps = steps[k] if steps is not None else eps
        name = names[k] if names is not None else str(k)
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        num = np.empty(len(idx))
        smooth = np.ones(len(idx), dtype=bool)
        with no_grad():
            for j, i in enumerate(idx):
                keep = flat[i]
                flat[i] = keep + eps
                up = loss().item()
                flat[i] = keep - eps
                down = loss().item()
                flat[i] = keep
                num[j] = (up - down) / (2 * eps)
                s_up, s_down = (up - f0) / eps, (f0 - down) / eps
                gap = abs(s_up - s_down)
                smooth[j] = gap <= KINK_RATIO * (abs(s_up) + abs(s_down)) + 1e-7
        probes += len(idx)
        kinks += int((~smooth).sum())
        an, nu = np.ravel(g)[idx][smooth], num[smooth]
        rep.analytic.append(an)
        rep.numeric.append(nu)
        floor = ROUNDOFF_ULPS * np.spacing(abs(f0)) / (2 * eps) * np.sqrt(max(len(nu), 1))
        if resolve and max(np.linalg.norm(an), np.linalg.norm(nu)) < RESOLVE_FACTOR * floor:
            rep.unresolved.append(name)
            continue
        rep.checked.append(name)
        err = rel_error(an, nu)
        if err > rep.worst:
            rep.worst, rep.worst_name = err, name
    if kinks > MAX_KINK_SHARE * probes:
        raise AssertionError(f"{kinks} of {probes} finite-difference probes straddle a kink")
    return rep


def _grad(t):
    return np.zeros_like(t.data) if t.grad is None else np.array(t.grad)


def check_fn(fn, arrays, eps=1e-6, max_coords=None, seed=0):
    """Worst relative gradient error of ``fn(*tensors)`` w.r.t. each float64 array.

    The output is reduced with a fixed random projection so every output
    element contributes. The arrays are perturbed in place and restored.
    """
    rng = np.random.default_rng(seed)
    with no_grad():
        shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = Tensor(rng.normal(size=shape))
    leaves = []

    def loss():
        leaves[:] = [Tensor(a, requires_grad=True) for a in arrays]   # shares memory with a
        return F.sum(F.mul(fn(*leaves), weights))

    loss().backward()
    analytic = [_grad(t) for t in leaves]
    return _probe(loss, arrays, analytic, eps, max_coords, rng).error


def check_module(module, forward, inputs, eps=1e-6, max_coords=None, seed=0, report=False):
    """Same as :func:`check_fn` but also covers every parameter of ``module``.

    ``eps`` may be a callable mapping a parameter name (inputs are named
    ``input0``, ``input1``, ...) to its finite-difference step. With
    ``report`` the full :class:`Report` comes back, screened for resolution.
    """
    rng = np.random.default_rng(seed)
    named = list(module.named_parameters())
    params = [p for _, p in named]
    names = [f"input{i}" for i in range(len(inputs))] + [n for n, _ in named]
    steps = [eps(n) if callable(eps) else eps for n in names]
    with no_grad():
        shape = forward(module, *[Tensor(a) for a in inputs]).shape
    weights = Tensor(rng.normal(size=shape))
    leaves = []

    def loss():
        leaves[:] = [Tensor(a, requires_grad=True) for a in inputs]
        return F.sum(F.mul(forward(module, *leaves), weights))

    module.zero_grad()
    loss().backward()
    analytic = [_grad(t) for t in leaves] + [_grad(p) for p in params]
    arrays = list(inputs) + [p.data for p in params]
    rep = _probe(loss, arrays, analytic, None, max_coords, rng, steps, names, resolve=report)
    return rep if report else rep.error
