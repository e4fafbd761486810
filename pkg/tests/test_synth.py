import numpy as np
import pytest

from fhe_er.synth import (PopulationSpec, export_csv, generate_population, identity_name,
                          import_csv)


def test_deterministic_per_seed():
    a = generate_population(PopulationSpec(n_identities=20, seed=5))
    b = generate_population(PopulationSpec(n_identities=20, seed=5))
    c = generate_population(PopulationSpec(n_identities=20, seed=6))
    assert np.array_equal(a.bm, b.bm) and np.array_equal(a.bg, b.bg)
    assert not np.array_equal(a.bm, c.bm)


def test_record_counts_and_split():
    pop = generate_population(PopulationSpec(n_identities=30, records_per_identity=(2, 7)))
    counts = np.bincount(pop.identity)
    assert counts.min() >= 2 and counts.max() <= 7
    gal, prb = pop.gallery_probe_split()
    assert len(gal) == 30 and len(gal) + len(prb) == len(pop)
    assert np.array_equal(gal.identity, np.arange(30))
    assert pop.bm.shape[1] == 128 and pop.bg.shape[1] == 128


def test_tiny_noise_collapses_records():
    spec = PopulationSpec(n_identities=5, intra_class_noise={"biometric": 1e-12,
                                                            "biographic": 1e-12})
    pop = generate_population(spec)
    for i in range(5):
        rows = pop.bm[pop.identity == i]
        assert np.allclose(rows, rows[0], atol=1e-9)


def test_intra_below_inter_distance():
    pop = generate_population(PopulationSpec())
    for x in (pop.bm, pop.bg):
        d = np.sum((x[:, None] - x[None]) ** 2, axis=-1)
        same = pop.identity[:, None] == pop.identity[None]
        off = ~np.eye(len(pop), dtype=bool)
        assert d[same & off].mean() < d[~same].mean()


def test_centroid_geometry():
    # noise-free records sit at the centroids; mean centroid gap is the separation
    spec = PopulationSpec(n_identities=200, records_per_identity=(1, 1),
                          intra_class_noise={"biometric": 1e-9, "biographic": 1e-9})
    pop = generate_population(spec)
    d = np.linalg.norm(pop.bm[:, None] - pop.bm[None], axis=-1)
    gaps = d[~np.eye(200, dtype=bool)]
    assert gaps.mean() == pytest.approx(1.0, rel=0.02)


@pytest.mark.parametrize("bad", [dict(n_identities=0), dict(records_per_identity=(3, 2)),
                                 dict(intra_class_noise={"biometric": 0.0, "biographic": 0.1}),
                                 dict(inter_class_separation=0.3),
                                 dict(intra_class_noise={"biometric": 0.1})])
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        PopulationSpec(**bad)


def test_csv_roundtrip(tmp_path):
    pop = generate_population(PopulationSpec(n_identities=4, seed=2))
    path = tmp_path / "pop.csv"
    export_csv(pop, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:4] == ["identity_id", "record_id", "modality", "v0"] and header[-1] == "v127"
    back = import_csv(path)
    order = np.lexsort((pop.record, pop.identity))
    assert np.array_equal(back.identity, pop.identity[order])
    assert np.array_equal(back.bm, pop.bm[order]) and np.array_equal(back.bg, pop.bg[order])
    assert identity_name(7) == "id00007"
