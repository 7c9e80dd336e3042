"""2D -> 1D scan orderings and the expand/merge pair that uses them.

Every ordering is a permutation ``perm`` of the row-major flat indices of an
H x W grid: ``perm[t]`` is the cell visited at step ``t``.

Kinds
-----
v1..v4  cross scan: row-major, column-major, and their reversals.
s1..s4  snake scan: serpentine over anti-diagonals (s1), the same walk on
        the column-mirrored grid (s2, i.e. along main diagonals), and their
        reversals.
r1..r4  random scan: two seeded uniform permutations and their reversals.

Random permutations come from :class:`random.Random` (MT19937) seeded with
the string ``"randscan:{seed}:{H}:{W}:{branch}"`` (branch 1 or 2) and
shuffled with ``Random.shuffle`` applied to ``list(range(H*W))``. String
seeding hashes with SHA-512 and is stable across platforms and Python
versions >= 3.2.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from .errors import EmptyProfile, InvalidArgument
from .nn.tensor import Tensor, record

CROSS_KINDS = ("v1", "v2", "v3", "v4")
SNAKE_KINDS = ("s1", "s2", "s3", "s4")
RANDOM_KINDS = ("r1", "r2", "r3", "r4")
ALL_KINDS = CROSS_KINDS + SNAKE_KINDS + RANDOM_KINDS

_REVERSED = {"v3": "v1", "v4": "v2", "s3": "s1", "s4": "s2", "r3": "r1", "r4": "r2"}


def _frozen(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.intp)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScanOrder:
    height: int
    width: int
    kind: str
    perm: np.ndarray
    inv: np.ndarray

    @classmethod
    def from_perm(cls, height: int, width: int, kind: str, perm) -> "ScanOrder":
        perm = np.asarray(perm, dtype=np.intp)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return cls(height, width, kind, _frozen(perm), _frozen(inv))

    @property
    def length(self) -> int:
        return self.height * self.width

    def reversed(self, kind: str) -> "ScanOrder":
        return ScanOrder.from_perm(self.height, self.width, kind, self.perm[::-1])

    def __eq__(self, other):
        return (isinstance(other, ScanOrder) and self.kind == other.kind
                and self.height == other.height and self.width == other.width
                and np.array_equal(self.perm, other.perm))

    __hash__ = None


@dataclass(frozen=True)
class DirectionSet:
    orders: tuple

    def __post_init__(self):
        if len(self.orders) != 4:
            raise InvalidArgument(f"a direction set holds exactly 4 orders, got {len(self.orders)}")
        h, w = self.orders[0].height, self.orders[0].width
        if any((o.height, o.width) != (h, w) for o in self.orders):
            raise InvalidArgument("all orders in a direction set must share (H, W)")
        perms = np.stack([o.perm for o in self.orders])
        invs = np.stack([o.inv for o in self.orders])
        perms.setflags(write=False)
        invs.setflags(write=False)
        object.__setattr__(self, "perms", perms)
        object.__setattr__(self, "invs", invs)

    @property
    def height(self) -> int:
        return self.orders[0].height

    @property
    def width(self) -> int:
        return self.orders[0].width

    @property
    def kinds(self) -> tuple:
        return tuple(o.kind for o in self.orders)

    def __iter__(self):
        return iter(self.orders)


def _check_dims(h, w):
    if int(h) < 1 or int(w) < 1:
        raise InvalidArgument(f"grid dimensions must be positive, got {h}x{w}")


def cross_order(h: int, w: int, direction: str) -> ScanOrder:
    _check_dims(h, w)
    if direction not in CROSS_KINDS:
        raise InvalidArgument(f"unknown cross direction {direction!r}")
    if direction in _REVERSED:
        return cross_order(h, w, _REVERSED[direction]).reversed(direction)
    grid = np.arange(h * w).reshape(h, w)
    perm = grid.ravel() if direction == "v1" else grid.T.ravel()
    return ScanOrder.from_perm(h, w, direction, perm)


def _antidiagonal_zigzag(h: int, w: int) -> list:
    cells = []
    for d in range(h + w - 1):
        rows = range(max(0, d - w + 1), min(d, h - 1) + 1)
        if d % 2 == 0:
            rows = reversed(rows)
        cells.extend((r, d - r) for r in rows)
    return cells


def snake_order(h: int, w: int, direction: str) -> ScanOrder:
    _check_dims(h, w)
    if direction not in SNAKE_KINDS:
        raise InvalidArgument(f"unknown snake direction {direction!r}")
    if direction in _REVERSED:
        return snake_order(h, w, _REVERSED[direction]).reversed(direction)
    cells = _antidiagonal_zigzag(h, w)
    if direction == "s1":
        perm = [r * w + c for r, c in cells]
    else:
        perm = [r * w + (w - 1 - c) for r, c in cells]
    return ScanOrder.from_perm(h, w, direction, perm)


def _random_perm(seed: int, h: int, w: int, branch: int) -> list:
    rng = random.Random(f"randscan:{seed}:{h}:{w}:{branch}")
    perm = list(range(h * w))
    rng.shuffle(perm)
    return perm


def random_orders(h: int, w: int, seed: int) -> DirectionSet:
    _check_dims(h, w)
    r1 = ScanOrder.from_perm(h, w, "r1", _random_perm(seed, h, w, 1))
    r2 = ScanOrder.from_perm(h, w, "r2", _random_perm(seed, h, w, 2))
    return DirectionSet((r1, r2, r1.reversed("r3"), r2.reversed("r4")))


def cross_dirs(h: int, w: int) -> DirectionSet:
    return DirectionSet(tuple(cross_order(h, w, k) for k in CROSS_KINDS))


def snake_dirs(h: int, w: int) -> DirectionSet:
    return DirectionSet(tuple(snake_order(h, w, k) for k in SNAKE_KINDS))


def make_order(h: int, w: int, kind: str, seed: int = 0) -> ScanOrder:
    """Any single order by kind name; ``seed`` only matters for r1..r4."""
    if kind in CROSS_KINDS:
        return cross_order(h, w, kind)
    if kind in SNAKE_KINDS:
        return snake_order(h, w, kind)
    if kind in RANDOM_KINDS:
        return random_orders(h, w, seed).orders[RANDOM_KINDS.index(kind)]
    raise InvalidArgument(f"unknown scan kind {kind!r}")


def direction_set(family: str, h: int, w: int, seed: int = 0) -> DirectionSet:
    if family == "cross":
        return cross_dirs(h, w)
    if family == "snake":
        return snake_dirs(h, w)
    if family == "random":
        return random_orders(h, w, seed)
    raise InvalidArgument(f"unknown scan family {family!r}")


# ---------------------------------------------------------------- expand / merge

def _check_grid(x: Tensor, dirs: DirectionSet):
    if x.ndim != 4 or x.shape[2:] != (dirs.height, dirs.width):
        raise InvalidArgument(
            f"expected [N,C,{dirs.height},{dirs.width}] input, got {list(x.shape)}")


def _gather_rows(flat: np.ndarray, index: np.ndarray) -> np.ndarray:
    # flat [N,C,L], index [4,L] -> [N,4,C,L] with out[n,k,c,t] = flat[n,c,index[k,t]]
    return np.ascontiguousarray(np.moveaxis(flat[:, :, index], 2, 1))


def _scatter_sum(seqs: np.ndarray, index: np.ndarray) -> np.ndarray:
    # seqs [N,4,C,L] -> [N,C,L], out[n,c,p] = sum_k seqs[n,k,c,index[k,p]]
    return np.take_along_axis(seqs, index[None, :, None, :], axis=3).sum(axis=1)


def expand(x: Tensor, dirs: DirectionSet) -> Tensor:
    """[N,C,H,W] -> [N,4,C,L]: one sequence per direction."""
    _check_grid(x, dirs)
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    out = _gather_rows(flat, dirs.perms)
    return record(out, (x,), lambda g: (_scatter_sum(g, dirs.invs).reshape(x.shape),))


def merge(seqs: Tensor, dirs: DirectionSet) -> Tensor:
    """[N,4,C,L] -> [N,C,H,W]: inverse-permute each sequence and sum the four grids."""
    h, w = dirs.height, dirs.width
    if seqs.ndim != 4 or seqs.shape[1] != 4 or seqs.shape[3] != h * w:
        raise InvalidArgument(f"expected [N,4,C,{h * w}] sequences, got {list(seqs.shape)}")
    n, _, c, _ = seqs.shape
    out = _scatter_sum(seqs.data, dirs.invs).reshape(n, c, h, w)

    def backward(g):
        return (_gather_rows(g.reshape(n, c, h * w), dirs.perms),)

    return record(out, (seqs,), backward)


# ---------------------------------------------------------------- diagnostics

@dataclass(frozen=True)
class AdjacencyProfile:
    max_step: int
    mean_step: float


def adjacency_profile(order: ScanOrder) -> AdjacencyProfile:
    """Chebyshev distance between consecutively visited cells."""
    if order.length < 2:
        raise EmptyProfile("an order of length 1 has no steps")
    r, c = np.divmod(order.perm, order.width)
    steps = np.maximum(np.abs(np.diff(r)), np.abs(np.diff(c)))
    return AdjacencyProfile(int(steps.max()), float(steps.mean()))


def visit_time_image(order: ScanOrder) -> np.ndarray:
    """uint8 [H,W] image whose intensity is the visit step scaled to 0..255."""
    t = order.inv.astype(np.float64)
    if order.length > 1:
        t = t * (255.0 / (order.length - 1))
    return np.floor(t + 0.5).astype(np.uint8).reshape(order.height, order.width)
