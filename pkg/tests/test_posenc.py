import numpy as np
import pytest

from msvil.attention.masks import build_vil_mask
from msvil.posenc import (G2G, G2L, L2G, Ape2d, RpbTable, ape_apply, grid_offsets,
                          rpb_bias_matrix, rpb_resize)
from msvil.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(0)


def test_ape_zero_tables_are_identity(rng):
    ape = Ape2d(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros((1, 4)))
    t = rng.standard_normal((13, 4))
    assert np.array_equal(ape_apply(t, ape, 3, 4), t)


def test_ape_indexing(rng):
    ape = Ape2d.init(5, 5, 4, 1, rng)
    out = ape_apply(np.zeros((1 + 25, 4)), ape, 5, 5)
    tok = out[1 + 2 * 5 + 3]
    assert np.array_equal(tok, [ape.y_table[2, 0], ape.y_table[2, 1], ape.x_table[3, 0], ape.x_table[3, 1]])
    a, b = out[1], out[2]  # (0,0) and (0,1)
    assert np.array_equal(a[:2], b[:2]) and not np.array_equal(a[2:], b[2:])
    assert np.array_equal(out[0], ape.global_table[0])


def test_ape_is_additive(rng):
    ape = Ape2d.init(3, 3, 4, 2, rng)
    t1, t2 = rng.standard_normal((11, 4)), rng.standard_normal((11, 4))
    assert np.allclose(ape_apply(t1 + t2, ape, 3, 3), ape_apply(t1, ape, 3, 3) + t2)


def test_ape_errors_beyond_table(rng):
    ape = Ape2d.init(3, 3, 4, 1, rng)
    with pytest.raises(ValueError, match="exceeds"):
        ape_apply(np.zeros((1 + 16, 4)), ape, 4, 4)
    with pytest.raises(ValueError):
        Ape2d.init(3, 3, 5, 1, rng)


def test_rpb_zero_table_gives_zero_bias():
    assert not rpb_bias_matrix(RpbTable.zeros(2, 3), 3, 3, 1).any()


def test_rpb_lookup_and_global_scalars(rng):
    rpb = RpbTable.init(2, 4, rng)
    W = 4
    bias = rpb_bias_matrix(rpb, 4, W, 1)
    q = 1 + 1 * W + 1  # (1,1)
    k = 1 + 2 * W + 0  # (2,0)
    assert np.array_equal(bias[:, q, k], rpb.table[:, 1 + 3, -1 + 3])
    assert np.array_equal(bias[:, 0, 0], rpb.global_bias[:, G2G])
    assert np.array_equal(bias[:, 0, 5], rpb.global_bias[:, G2L])
    assert np.array_equal(bias[:, 5, 0], rpb.global_bias[:, L2G])


def test_rpb_translation_invariance(rng):
    rpb = RpbTable.init(1, 6, rng)
    H = W = 6
    bias = rpb_bias_matrix(rpb, H, W, 0)[0]
    dy, dx = grid_offsets(H, W)
    for off in set(zip(dy.ravel().tolist(), dx.ravel().tolist())):
        vals = bias[(dy == off[0]) & (dx == off[1])]
        assert np.all(vals == vals[0])
    # shifting query and key by (+3,+5) changes nothing
    H, W = 10, 10
    bias = rpb_bias_matrix(RpbTable.init(1, 10, make_rng(1)), H, W, 0)[0]
    assert bias[1 * W + 1, 2 * W + 0] == bias[4 * W + 6, 5 * W + 5]


def test_rpb_out_of_range_offset_names_it(rng):
    rpb = RpbTable.init(1, 2, rng)
    with pytest.raises(ValueError, match="offset"):
        rpb_bias_matrix(rpb, 4, 4, 0)
    mask = build_vil_mask(4, 4, 0, 3, "exact")
    rpb_bias_matrix(rpb, 4, 4, 0, mask)  # window 3 only needs offsets up to 1


def test_rpb_resize(rng):
    rpb = RpbTable.init(2, 3, rng)
    same = rpb_resize(rpb, 3)
    assert np.array_equal(same.table, rpb.table)
    const = RpbTable(np.full((1, 5, 5), 0.7), np.ones((1, 3)))
    assert np.allclose(rpb_resize(const, 5).table, 0.7)
    t = RpbTable(np.arange(9.0).reshape(1, 3, 3), np.arange(3.0)[None])
    big = rpb_resize(t, 3)
    assert big.table.shape == (1, 5, 5)
    assert big.table[0, 2, 2] == 4
    assert [big.table[0, i, j] for i, j in ((0, 0), (0, 4), (4, 0), (4, 4))] == [0, 2, 6, 8]
    assert np.array_equal(big.global_bias, t.global_bias)
    back = rpb_resize(big, 2)
    assert np.array_equal(back.table[0][[0, 0, 1, 2, 2], [0, 2, 1, 0, 2]],
                          t.table[0][[0, 0, 1, 2, 2], [0, 2, 1, 0, 2]])
