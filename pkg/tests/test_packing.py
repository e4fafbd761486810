import numpy as np
import pytest

from fhe_er import he
from fhe_er.packing import BlockLayout, MaskCache, merge_tree, pack_blocks


def test_layout():
    lay = BlockLayout(2048, 128)
    assert (lay.blocks, lay.height) == (16, 7)
    t = lay.tile([1.0, 2.0])
    assert t.shape == (2048,) and t[128] == 1.0 and t[129] == 2.0 and t[2] == 0.0
    assert lay.slot(3, 5) == 3 * 128 + 5
    for w in (1, 3, 4096):
        with pytest.raises(ValueError):
            BlockLayout(2048, w)
    with pytest.raises(ValueError):
        lay.tile(np.ones(129))


def test_pack_blocks(small_keys, rng):
    lay = BlockLayout(small_keys.params.slots, 16)
    vals = rng.uniform(-1, 1, (5, 16))
    cts = [he.encrypt(v, small_keys, rng=i) for i, v in enumerate(vals)]
    got = he.decrypt(pack_blocks(cts, lay, small_keys), small_keys)
    want = np.zeros(lay.slots)
    want[: 5 * 16] = vals.ravel()
    assert np.max(np.abs(got - want)) < 2 ** -17


@pytest.mark.parametrize("n_leaves", [1, 5, 8])
def test_merge_tree_block_sums(small_keys, n_leaves):
    r = np.random.default_rng(n_leaves)
    w = 8
    lay = BlockLayout(small_keys.params.slots, w)
    masks = MaskCache(small_keys.params, lay)
    data = r.uniform(-1, 1, (n_leaves, lay.slots))
    leaves = ((i, he.square(he.encrypt(d, small_keys, rng=i), small_keys))
              for i, d in enumerate(data))
    valid_blocks = lay.blocks - 3

    def valid(src):
        return np.arange(lay.blocks) < valid_blocks - src

    root, sources = merge_tree(leaves, lay, small_keys, masks, weight=0.25, valid=valid)
    assert root.level == small_keys.params.levels - 1 - lay.height
    got = he.decrypt(root, small_keys).reshape(lay.blocks, w)
    sums = (data ** 2).reshape(n_leaves, lay.blocks, w).sum(axis=2)
    for s, src in enumerate(sources):
        if src is None:
            assert np.max(np.abs(got[:, s])) < 2 ** -15
            continue
        want = 0.25 * sums[src] * valid(src)
        assert np.max(np.abs(got[:, s] - want)) < 2 ** -14
    assert sorted(s for s in sources if s is not None) == list(range(n_leaves))


def test_merge_tree_limits(small_keys):
    lay = BlockLayout(small_keys.params.slots, 2)
    masks = MaskCache(small_keys.params, lay)
    ct = he.encrypt([0.1], small_keys, rng=0)
    with pytest.raises(ValueError):
        merge_tree([], lay, small_keys, masks)
    with pytest.raises(ValueError):
        merge_tree([(i, ct) for i in range(3)], lay, small_keys, masks)
