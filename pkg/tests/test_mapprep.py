import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from panodiff import mapprep as mp


def test_min_pool_examples():
    assert mp.min_pool(np.array([[7, 100], [100, 100]]), 2).tolist() == [[7]]
    assert mp.min_pool(np.zeros((2, 2), dtype=np.uint8), 2).tolist() == [[0]]
    assert mp.min_pool(np.array([[0, 92], [15, 92]]), 2).tolist() == [[15]]


def test_min_pool_indivisible():
    with pytest.raises(mp.AlignmentError):
        mp.min_pool(np.zeros((6, 6)), 4)


map_strategy = st.sampled_from([1, 2, 4]).flatmap(
    lambda k: st.tuples(st.just(k), arrays(np.uint8, (4 * k, 4 * k),
                                           elements=st.sampled_from([0, 1, 5, 92, 150, 200]))))


@settings(max_examples=60, deadline=None)
@given(km=map_strategy)
def test_min_pool_properties(km):
    k, m = km
    out = mp.min_pool(m, k)
    assert out.shape == (4, 4)
    assert set(np.unique(out)) <= set(np.unique(m))
    blocks = m.reshape(4, k, 4, k)
    labeled = (blocks != 0).any(axis=(1, 3))
    assert not ((out == 0) & labeled).any()
    if k == 1:
        assert np.array_equal(out, m)


def test_alignment_examples():
    assert mp.check_alignment((16, 16), 2, 2, (32, 32)) == (8, 8)
    assert mp.check_alignment((16, 16), 2, 4, (64, 64)) == (8, 8)
    with pytest.raises(mp.AlignmentError) as e:
        mp.check_alignment((16, 16), 2, 2, (48, 48))
    msg = str(e.value)
    assert all(s in msg for s in ("16x16", "patch 2", "factor 2", "48x48"))


def test_colorize():
    table = mp.color_table(0)
    assert (mp.colorize(np.zeros((3, 3), dtype=np.uint8), table) == 0).all()
    rgb = mp.colorize(np.array([[1, 1], [150, 150]]), table)
    assert len({tuple(p) for p in rgb.reshape(-1, 3)}) == 2
    assert mp.colorize(np.array([[5]]), mp.color_table(3)).tobytes() == \
        mp.colorize(np.array([[5]]), mp.color_table(3)).tobytes()
    assert not np.array_equal(mp.color_table(0), mp.color_table(1))
