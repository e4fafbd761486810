import csv
import json

import numpy as np
import pytest

from fhe_er import he
from fhe_er.compare import CompareConfig
from fhe_er.matcher import (ConflictError, FusionMode, MatchError, MatchPolicy, PolicyError,
                            Stores, StoreError, TimingReport, batch_match, build_policy, enroll,
                            identify, mirror_match, mirror_scores, score_sets, verify_1n,
                            write_timing_csv)
from fhe_er.metrics import rank_list
from fhe_er.synth import PopulationSpec, generate_population, identity_name

N_GALLERY = 12


@pytest.fixture(scope="module")
def data():
    pop = generate_population(PopulationSpec(n_identities=N_GALLERY, seed=21))
    train = generate_population(PopulationSpec(n_identities=60, seed=22))
    gal, prb = pop.gallery_probe_split()
    return train, gal, prb


def _policy(train, mode, keys):
    return build_policy(train.bm, train.bg, train.identity, mode, keys,
                        train_record=train.record, rng=np.random.default_rng(0))


@pytest.fixture(scope="module")
def setups(data, match_keys):
    train, gal, _ = data
    out = {}
    for mode in (FusionMode.SCORE_LEVEL, FusionMode.FEATURE_LEVEL):
        pol = _policy(train, mode, match_keys)
        st = Stores.empty(match_keys.params)
        for i in range(len(gal)):
            enroll(identity_name(gal.identity[i]), gal.bm[i], gal.bg[i], pol, match_keys, st,
                   rng=i)
        out[mode] = (pol, st)
    return out


def gallery_pairs(gal):
    return [(gal.bm[i], gal.bg[i]) for i in range(len(gal))]


# -- enrollment and stores ----------------------------------------------------

def test_enroll_roundtrip(data, setups, match_keys):
    _, gal, _ = data
    pol, st = setups[FusionMode.SCORE_LEVEL]
    nbm, nbg = pol.normalize(gal.bm[3], gal.bg[3])
    want = (nbm, nbg, np.concatenate([nbm, nbg]))
    for store, w in zip(st.all(), want):
        got = he.decrypt(store.ciphertext(identity_name(3), match_keys.params), match_keys,
                         n=w.size)
        assert np.max(np.abs(got - w)) < 2 ** -19


def test_enroll_into_empty(data, setups, match_keys):
    _, gal, _ = data
    pol, _ = setups[FusionMode.SCORE_LEVEL]
    st = Stores.empty(match_keys.params)
    enroll("solo", gal.bm[0], gal.bg[0], pol, match_keys, st, rng=1)
    assert [s.ids() for s in st.all()] == [["solo"]] * 3


def test_duplicate_id_conflict(data, setups, match_keys):
    _, gal, _ = data
    pol, st = setups[FusionMode.SCORE_LEVEL]
    before = [dict(s.entries) for s in st.all()]
    with pytest.raises(ConflictError):
        enroll(identity_name(0), gal.bm[1], gal.bg[1], pol, match_keys, st)
    assert [dict(s.entries) for s in st.all()] == before


def test_failed_enroll_is_atomic(data, setups, match_keys, monkeypatch):
    _, gal, _ = data
    pol, _ = setups[FusionMode.SCORE_LEVEL]
    st = Stores.empty(match_keys.params)
    enroll("a", gal.bm[0], gal.bg[0], pol, match_keys, st, rng=1)

    def boom(entity_id, blob):
        raise OSError("disk full")

    monkeypatch.setattr(st.fused, "_put", boom)
    with pytest.raises(OSError):
        enroll("b", gal.bm[1], gal.bg[1], pol, match_keys, st, rng=2)
    assert [s.ids() for s in st.all()] == [["a"]] * 3


def test_enroll_validation(data, setups, match_keys, small_keys):
    _, gal, _ = data
    pol, _ = setups[FusionMode.SCORE_LEVEL]
    st = Stores.empty(match_keys.params)
    with pytest.raises(StoreError):
        enroll("bad/id", gal.bm[0], gal.bg[0], pol, match_keys, st)
    with pytest.raises(ValueError):
        enroll("x", gal.bm[0][:10], gal.bg[0], pol, match_keys, st)
    with pytest.raises(StoreError):
        enroll("x", gal.bm[0], gal.bg[0], pol, small_keys, st)
    assert len(st) == 0


def test_store_persistence(setups, match_keys, tmp_path):
    _, st = setups[FusionMode.SCORE_LEVEL]
    st.save(tmp_path)
    manifest = json.loads((tmp_path / "fused" / "manifest.json").read_text())
    assert manifest["ids"] == st.ids()
    assert manifest["params_digest"] == match_keys.params.digest.hex()
    assert (tmp_path / "biometric" / f"{st.ids()[0]}.ct").exists()
    back = Stores.load(tmp_path)
    assert back.ids() == st.ids()
    assert back.fused.entries == st.fused.entries
    with pytest.raises(StoreError):
        Stores.open(tmp_path, he.make_params(2 ** 12, 4))


# -- policy -------------------------------------------------------------------

def test_policy_threshold_ciphertext(setups, match_keys, tmp_path):
    pol, _ = setups[FusionMode.FEATURE_LEVEL]
    assert 0 <= pol.threshold <= 1
    dec = he.decrypt(pol.threshold_ct, match_keys)
    assert np.max(np.abs(dec - pol.threshold)) < 2 ** -15
    path = tmp_path / "policy.json"
    pol.save(path)
    back = MatchPolicy.load(path, match_keys.params)
    assert back.to_dict() == pol.to_dict()
    assert np.array_equal(back.threshold_ct.c0, pol.threshold_ct.c0)


def test_policy_margin_check(data):
    train, _, _ = data
    pol = _policy(train, FusionMode.SCORE_LEVEL, None)
    sc = mirror_scores(list(zip(train.bm[train.record > 0], train.bg[train.record > 0])),
                       list(zip(train.bm[train.record == 0], train.bg[train.record == 0])), pol)
    same = (train.identity[train.record > 0][:, None]
            == train.identity[train.record == 0][None])
    with pytest.raises(PolicyError):
        build_policy(train.bm, train.bg, train.identity, FusionMode.SCORE_LEVEL,
                     threshold=float(sc[same].mean()) + 0.01, train_record=train.record)
    with pytest.raises(PolicyError):
        MatchPolicy(FusionMode.SCORE_LEVEL, 1.5, pol.norm_stats)


def test_threshold_monotone(data, setups):
    _, gal, prb = data
    pol, _ = setups[FusionMode.SCORE_LEVEL]
    qs = list(zip(prb.bm[:10], prb.bg[:10]))
    ids = [identity_name(i) for i in gal.identity]
    prev = None
    for t in np.linspace(0.05, 0.95, 19):
        p = MatchPolicy(pol.fusion_mode, float(t), pol.norm_stats, CompareConfig())
        bits = np.array([[d.accept for d in row]
                         for row in mirror_match(qs, ids, gallery_pairs(gal), p)])
        if prev is not None:
            assert np.all(bits >= prev)
        prev = bits


# -- matching -----------------------------------------------------------------

@pytest.mark.parametrize("mode", [FusionMode.SCORE_LEVEL, FusionMode.FEATURE_LEVEL])
def test_verify_matches_mirror(data, setups, match_keys, mode):
    _, gal, prb = data
    pol, st = setups[mode]
    q = (prb.bm[0], prb.bg[0])
    dec = verify_1n(*q, pol, match_keys, st, seed=3)
    mir = mirror_match([q], st.ids(), gallery_pairs(gal), pol)[0]
    scores = mirror_scores([q], gallery_pairs(gal), pol)[0]
    assert [d.entity_id for d in dec] == st.ids()
    for d, m, s in zip(dec, mir, scores):
        assert d.accept == (d.comp_output > 0.5)
        if abs(s - pol.threshold) >= pol.compare_config.margin:
            assert d.accept == m.accept
        if 0 < s < 1:
            assert abs(d.distance_score - s) < 2 ** -12


def test_enrolled_template_is_accepted(data, setups, match_keys):
    _, gal, _ = data
    pol, st = setups[FusionMode.FEATURE_LEVEL]
    dec = verify_1n(gal.bm[5], gal.bg[5], pol, match_keys, st, seed=1)
    hit = [d for d in dec if d.entity_id == identity_name(5)][0]
    assert hit.accept and hit.comp_output > 0.99
    # zero distance maps to the affine offset (below 0 before clamping)
    assert abs(hit.distance_score - pol.plain_score(0.0, 0.0, clamp=False)) < 2 ** -12


def test_far_query_rejected(setups, match_keys):
    pol, st = setups[FusionMode.SCORE_LEVEL]
    r = np.random.default_rng(5)
    far = (r.normal(0, 3, 128), r.normal(0, 3, 128))
    dec = verify_1n(*far, pol, match_keys, st, seed=2)
    assert len(dec) == N_GALLERY and not any(d.accept for d in dec)


def test_verify_empty_gallery(setups, match_keys):
    pol, _ = setups[FusionMode.SCORE_LEVEL]
    st = Stores.empty(match_keys.params)
    assert verify_1n(np.zeros(128), np.zeros(128), pol, match_keys, st) == []


def test_identify_matches_plaintext_sort(data, setups, match_keys):
    _, gal, prb = data
    pol, st = setups[FusionMode.SCORE_LEVEL]
    q = (prb.bm[2], prb.bg[2])
    got = identify(*q, pol, match_keys, st, k=N_GALLERY, seed=4)
    unclamped = pol.plain_score(*[np.sum((a - b) ** 2, axis=1) for a, b in
                                  zip(pol.normalize(*q), pol.normalize(gal.bm, gal.bg))],
                                clamp=False)
    assert got == rank_list(st.ids(), list(unclamped))
    assert identify(*q, pol, match_keys, st, k=3, seed=4) == got[:3]
    with pytest.raises(ValueError):
        identify(*q, pol, match_keys, st, k=N_GALLERY + 1)


def test_identify_single_and_self(data, setups, match_keys):
    _, gal, _ = data
    pol, st = setups[FusionMode.FEATURE_LEVEL]
    assert identify(gal.bm[7], gal.bg[7], pol, match_keys, st, k=1, seed=0) == [identity_name(7)]
    one = Stores.empty(match_keys.params)
    enroll("only", gal.bm[0], gal.bg[0], pol, match_keys, one, rng=0)
    assert identify(gal.bm[3], gal.bg[3], pol, match_keys, one, k=1) == ["only"]


def test_batch_is_thread_independent(data, setups, match_keys):
    _, _, prb = data
    pol, st = setups[FusionMode.SCORE_LEVEL]
    qs = list(zip(prb.bm[:4], prb.bg[:4]))
    d1, r1 = batch_match(qs, pol, match_keys, st, thread_count=1, seed=9, unit_size=2)
    d3, r3 = batch_match(qs, pol, match_keys, st, thread_count=3, seed=9, unit_size=2)
    assert [[x.to_dict() for x in row] for row in d1] == [[x.to_dict() for x in row] for row in d3]
    assert r1.pairs == r3.pairs == 4 * N_GALLERY
    assert len(r1.unit_latency_ms) == 2
    assert set(r1.latency_summary()) == {"mean", "p50", "p90", "p99", "max"}
    with pytest.raises(ValueError):
        batch_match(qs, pol, match_keys, st, thread_count=0)


def test_score_sets_match_mirror(data, setups, match_keys):
    _, gal, prb = data
    pol, st = setups[FusionMode.FEATURE_LEVEL]
    qs = list(zip(prb.bm[:3], prb.bg[:3]))
    got = score_sets(qs, pol, match_keys, st, seed=1)
    want = mirror_scores(qs, gallery_pairs(gal), pol)
    inside = (want > 0) & (want < 1)
    assert np.max(np.abs(got - want)[inside]) < 2 ** -12


def test_depth_error_names_entity(data, setups, small_keys):
    train, gal, _ = data
    pol = _policy(train, FusionMode.SCORE_LEVEL, small_keys)
    st = Stores.empty(small_keys.params)
    enroll("e1", gal.bm[0], gal.bg[0], pol, small_keys, st, rng=0)
    with pytest.raises(MatchError) as exc:
        verify_1n(gal.bm[0], gal.bg[0], pol, small_keys, st)
    assert exc.value.entity_id == "e1"
    assert isinstance(exc.value, he.DepthError)


def test_timing_csv(tmp_path):
    rep = TimingReport(2, 1000.0, 1800.0, 50, [400.0, 600.0], [25, 25])
    assert rep.pairs_per_sec == 50.0
    path = tmp_path / "t.csv"
    write_timing_csv([rep], path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["threads", "elapsed_ms", "cpu_ms", "pairs", "pairs_per_sec"]
    assert rows[1] == ["2", "1000.0", "1800.0", "50", "50.0"]
