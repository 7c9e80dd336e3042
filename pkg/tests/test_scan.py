from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crackmamba import scan
from crackmamba.errors import EmptyProfile, InvalidArgument
from crackmamba.nn import Tensor

FIXTURES = Path(__file__).parent / "fixtures"
dims = st.integers(1, 16)


@pytest.mark.parametrize("kind,expected", [
    ("v1", [0, 1, 2, 3, 4, 5, 6, 7, 8]),
    ("v2", [0, 3, 6, 1, 4, 7, 2, 5, 8]),
    ("v3", [8, 7, 6, 5, 4, 3, 2, 1, 0]),
    ("v4", [8, 5, 2, 7, 4, 1, 6, 3, 0]),
    ("s1", [0, 1, 3, 6, 4, 2, 5, 7, 8]),
    ("s2", [2, 1, 5, 8, 4, 0, 3, 7, 6]),
    ("s3", [8, 7, 5, 2, 4, 6, 3, 1, 0]),
    ("s4", [6, 7, 3, 0, 4, 8, 5, 1, 2]),
])
def test_3x3_orders(kind, expected):
    assert list(scan.make_order(3, 3, kind).perm) == expected


def test_snake_non_square():
    # 2x3: diagonals (0,0) | (0,1)(1,0) | (1,1)(0,2) | (1,2)
    assert list(scan.snake_order(2, 3, "s1").perm) == [0, 1, 3, 4, 2, 5]
    assert list(scan.snake_order(1, 1, "s1").perm) == [0]


def test_random_fixture_frozen():
    text = (FIXTURES / "random_r1_4x4_seed7.txt").read_text().splitlines()
    frozen = [int(v) for v in text[1].split()]
    dirs = scan.random_orders(4, 4, 7)
    assert list(dirs.orders[0].perm) == frozen
    assert list(dirs.orders[2].perm) == frozen[::-1]


def test_random_two_cells_and_determinism():
    d = scan.random_orders(1, 2, 123)
    assert sorted(d.orders[0].perm) == [0, 1]
    assert list(d.orders[2].perm) == list(d.orders[0].perm)[::-1]
    assert scan.random_orders(5, 3, 9) == scan.random_orders(5, 3, 9)
    assert scan.random_orders(5, 3, 9).orders[0] != scan.random_orders(5, 3, 10).orders[0]


def test_zero_dimension_rejected():
    with pytest.raises(InvalidArgument):
        scan.cross_order(0, 3, "v1")
    with pytest.raises(InvalidArgument):
        scan.snake_order(3, 0, "s1")
    with pytest.raises(InvalidArgument):
        scan.make_order(3, 3, "q9")


def test_expand_cross_2x2():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    seqs = scan.expand(x, scan.cross_dirs(2, 2)).data[0, :, 0]
    assert seqs.tolist() == [[1, 2, 3, 4], [1, 3, 2, 4], [4, 3, 2, 1], [4, 2, 3, 1]]


def test_expand_snake_3x3():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    assert scan.expand(x, scan.snake_dirs(3, 3)).data[0, 0, 0].tolist() == [0, 1, 3, 6, 4, 2, 5, 7, 8]


def test_merge_one_hot_and_zero():
    dirs = scan.snake_dirs(3, 4)
    seqs = np.zeros((1, 4, 1, 12))
    assert not scan.merge(Tensor(seqs), dirs).data.any()
    seqs[0, 2, 0, 5] = 1.0
    grid = scan.merge(Tensor(seqs), dirs).data.ravel()
    assert np.flatnonzero(grid).tolist() == [dirs.orders[2].perm[5]]


def test_shape_mismatch():
    with pytest.raises(InvalidArgument):
        scan.expand(Tensor(np.zeros((1, 1, 3, 3))), scan.cross_dirs(3, 4))
    with pytest.raises(InvalidArgument):
        scan.merge(Tensor(np.zeros((1, 4, 1, 8))), scan.cross_dirs(3, 3))


def test_adjacency_examples():
    assert scan.adjacency_profile(scan.cross_order(3, 3, "v1")).max_step == 2
    assert scan.adjacency_profile(scan.cross_order(7, 1, "v1")).max_step == 1
    with pytest.raises(EmptyProfile):
        scan.adjacency_profile(scan.cross_order(1, 1, "v1"))


def test_visit_time_image_3x3():
    img = scan.visit_time_image(scan.snake_order(3, 3, "s1"))
    ranks = np.argsort(np.argsort(img.ravel()))
    assert ranks.tolist() == [0, 1, 5, 2, 4, 6, 3, 7, 8]
    assert img.min() == 0 and img.max() == 255 and img.dtype == np.uint8


@settings(max_examples=60, deadline=None)
@given(dims, dims, st.sampled_from(scan.ALL_KINDS), st.integers(0, 2**63 - 1))
def test_order_laws(h, w, kind, seed):
    o = scan.make_order(h, w, kind, seed)
    L = h * w
    assert sorted(o.perm.tolist()) == list(range(L))
    assert (o.inv[o.perm] == np.arange(L)).all()
    base = {"v3": "v1", "v4": "v2", "s3": "s1", "s4": "s2", "r3": "r1", "r4": "r2"}.get(kind)
    if base:
        assert (o.perm == scan.make_order(h, w, base, seed).perm[::-1]).all()


@settings(max_examples=40, deadline=None)
@given(dims, dims, st.sampled_from(["s1", "s2", "s3", "s4"]))
def test_snake_continuity(h, w, kind):
    if h * w > 1:
        assert scan.adjacency_profile(scan.snake_order(h, w, kind)).max_step == 1


@settings(max_examples=30, deadline=None)
@given(dims, dims, st.sampled_from(["cross", "snake", "random"]), st.integers(0, 1000))
def test_merge_expand_is_four_identity(h, w, family, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-50, 50, size=(2, 3, h, w)).astype(np.float64)
    dirs = scan.direction_set(family, h, w, seed)
    seqs = scan.expand(Tensor(x), dirs)
    assert np.array_equal(scan.merge(seqs, dirs).data, 4 * x)
    # each single sequence restores the grid bitwise
    for k, o in enumerate(dirs.orders):
        back = seqs.data[:, k][..., o.inv].reshape(x.shape)
        assert np.array_equal(back, x)
