import numpy as np
import pytest

from oracles import brute_cmc, brute_tpr, dense_eer, random_sets

from fhe_er.metrics import (ResolutionError, cmc_curve, det_points, eer, eer_threshold,
                            rank_list, roc_points, sweep, tpr_at_fmr)


# -- tests --------------------------------------------------------------------

def test_eer_examples():
    assert eer([0.1, 0.2], [0.3, 0.4]) == 0.0
    assert eer([0.1, 0.2, 0.3, 0.4, 0.5], [0.1, 0.2, 0.3, 0.4, 0.5]) == pytest.approx(0.5)
    # value read off the brute-force sweep oracle before the build
    assert dense_eer([0.1, 0.3], [0.2, 0.4]) == pytest.approx(0.5, abs=1e-4)
    assert eer([0.1, 0.3], [0.2, 0.4]) == 0.5


def test_eer_rejects_bad_input():
    with pytest.raises(ValueError):
        eer([], [0.1])
    with pytest.raises(ValueError):
        eer([np.nan], [0.1])


@pytest.mark.parametrize("seed", range(10))
def test_eer_matches_dense_sweep(seed):
    gen, imp = random_sets(seed)
    assert abs(eer(gen, imp) - dense_eer(gen, imp)) < 1e-4


def test_eer_threshold_splits_rates():
    gen, imp = random_sets(99)
    t = eer_threshold(gen, imp)
    fmr = np.mean(imp <= t)
    fnmr = np.mean(gen > t)
    assert abs(fmr - fnmr) <= 1 / len(gen) + 1 / len(imp)
    assert eer_threshold([0.1, 0.2], [0.3, 0.4]) == pytest.approx(0.25)


@pytest.mark.parametrize("seed", range(10))
def test_tpr_at_fmr_matches_brute(seed):
    gen, imp = random_sets(seed + 100)
    for target in (0.01, 0.05, 0.2):
        assert tpr_at_fmr(gen, imp, target) == pytest.approx(brute_tpr(gen, imp, target))


def test_tpr_at_fmr_trivial_cases():
    r = np.random.default_rng(1)
    assert tpr_at_fmr([0.1, 0.2], np.linspace(0.5, 1, 1000), 1e-3) == 1.0
    same = r.uniform(0, 1, 20000)
    assert tpr_at_fmr(same, same, 0.01) == pytest.approx(0.01, abs=1e-3)
    with pytest.raises(ResolutionError):
        tpr_at_fmr([0.1], [0.2] * 99, 1e-2)
    with pytest.raises(ValueError):
        tpr_at_fmr([0.1], [0.2], 0.0)


def test_curves_are_monotone():
    gen, imp = random_sets(5)
    roc = roc_points(gen, imp)
    assert roc[0] == (0.0, 0.0) and roc[-1] == (1.0, 1.0)
    assert all(b[0] >= a[0] and b[1] >= a[1] for a, b in zip(roc, roc[1:]))
    det = det_points(gen, imp)
    assert all(b[0] >= a[0] and b[1] <= a[1] for a, b in zip(det, det[1:]))
    t, fmr, fnmr = sweep(gen, imp)
    assert len(t) == len(set(gen) | set(imp)) + 1


def test_rank_list_ties_by_id():
    assert rank_list(["b", "a", "c"], [0.5, 0.5, 0.1]) == ["c", "a", "b"]


@pytest.mark.parametrize("seed", range(10))
def test_cmc_matches_recount(seed):
    r = np.random.default_rng(seed)
    ids = [f"g{i:02d}" for i in range(r.integers(3, 12))]
    nq = r.integers(1, 15)
    rows = np.round(r.uniform(0, 1, (nq, len(ids))), 1)  # rounding forces ties
    truth = [ids[i] for i in r.integers(0, len(ids), nq)]
    ranks = [rank_list(ids, list(row)) for row in rows]
    got = cmc_curve(ranks, truth, len(ids))
    assert np.allclose(got, brute_cmc(rows.tolist(), ids, truth, len(ids)), atol=1e-12)
    assert all(b >= a for a, b in zip(got, got[1:]))


def test_cmc_trivial_cases():
    assert cmc_curve([["a", "b"], ["b", "a"]], ["a", "b"], 2) == [1.0, 1.0]
    assert cmc_curve([["a"], ["a"]], ["a", "a"], 1) == [1.0]
    with pytest.raises(ValueError):
        cmc_curve([["a", "b"]], ["z"], 2)
    with pytest.raises(ValueError):
        cmc_curve([["a"]], ["a"], 0)
