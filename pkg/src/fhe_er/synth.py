"""Seeded synthetic identities with a biometric and a biographic template per record."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fusion import DEFAULT_DIM, Modality


@dataclass(frozen=True)
class PopulationSpec:
    """Identity geometry for the generator.

    Centroids are uniform directions on the hypersphere scaled so that two
    centroids sit ``inter_class_separation`` apart on average.  Each record adds
    isotropic Gaussian noise with the per-modality standard deviation (per
    component).
    """

    n_identities: int = 100
    records_per_identity: tuple[int, int] = (2, 7)
    intra_class_noise: dict = field(default_factory=lambda: {
        Modality.BIOMETRIC.value: 0.1, Modality.BIOGRAPHIC.value: 0.115})
    inter_class_separation: float = 1.0
    seed: int = 0
    dim_bm: int = DEFAULT_DIM
    dim_bg: int = DEFAULT_DIM

    def __post_init__(self):
        noise = {Modality(k).value: float(v) for k, v in dict(self.intra_class_noise).items()}
        object.__setattr__(self, "intra_class_noise", noise)
        if set(noise) != {Modality.BIOMETRIC.value, Modality.BIOGRAPHIC.value}:
            raise ValueError("noise must be given for the biometric and biographic modalities")
        lo, hi = self.records_per_identity
        if self.n_identities < 1:
            raise ValueError("n_identities must be positive")
        if not 1 <= lo <= hi:
            raise ValueError("records_per_identity must be a range with 1 <= lo <= hi")
        for v in noise.values():
            if not v > 0:
                raise ValueError("intra-class noise must be positive")
            if not self.inter_class_separation > 4 * v:
                raise ValueError("inter-class separation must exceed 4x the intra-class noise")
        if self.dim_bm < 2 or self.dim_bg < 2:
            raise ValueError("template dimensions must be at least 2")

    @property
    def noise_bm(self) -> float:
        return self.intra_class_noise[Modality.BIOMETRIC.value]

    @property
    def noise_bg(self) -> float:
        return self.intra_class_noise[Modality.BIOGRAPHIC.value]

    def with_seed(self, seed: int) -> "PopulationSpec":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {"n_identities": self.n_identities,
                "records_per_identity": list(self.records_per_identity),
                "intra_class_noise": dict(self.intra_class_noise),
                "inter_class_separation": self.inter_class_separation, "seed": self.seed,
                "dim_bm": self.dim_bm, "dim_bg": self.dim_bg}


@dataclass(frozen=True, eq=False)
class Population:
    identity: np.ndarray      # (R,) identity index per record
    record: np.ndarray        # (R,) record index within its identity
    bm: np.ndarray            # (R, dim_bm)
    bg: np.ndarray            # (R, dim_bg)

    def __len__(self):
        return self.identity.shape[0]

    def ids(self) -> list[str]:
        return [identity_name(i) for i in self.identity]

    def subset(self, mask) -> "Population":
        return Population(self.identity[mask], self.record[mask], self.bm[mask], self.bg[mask])

    def gallery_probe_split(self) -> tuple["Population", "Population"]:
        """First record of every identity forms the gallery; the rest are probes."""
        first = self.record == 0
        return self.subset(first), self.subset(~first)


def identity_name(i: int) -> str:
    return f"id{int(i):05d}"


def _directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_population(spec: PopulationSpec) -> Population:
    rng = np.random.default_rng(spec.seed)
    radius = spec.inter_class_separation / math.sqrt(2.0)
    c_bm = radius * _directions(rng, spec.n_identities, spec.dim_bm)
    c_bg = radius * _directions(rng, spec.n_identities, spec.dim_bg)
    lo, hi = spec.records_per_identity
    counts = rng.integers(lo, hi + 1, spec.n_identities)
    identity = np.repeat(np.arange(spec.n_identities), counts)
    record = np.concatenate([np.arange(c) for c in counts])
    n = identity.shape[0]
    bm = c_bm[identity] + spec.noise_bm * rng.standard_normal((n, spec.dim_bm))
    bg = c_bg[identity] + spec.noise_bg * rng.standard_normal((n, spec.dim_bg))
    return Population(identity, record, bm, bg)


def export_csv(pop: Population, path):
    """Write one row per (record, modality): ``identity_id,record_id,modality,v0,...``."""
    dim = max(pop.bm.shape[1], pop.bg.shape[1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["identity_id", "record_id", "modality"] + [f"v{k}" for k in range(dim)])
        for r in range(len(pop)):
            for mod, vec in ((Modality.BIOMETRIC, pop.bm[r]), (Modality.BIOGRAPHIC, pop.bg[r])):
                w.writerow([identity_name(pop.identity[r]), int(pop.record[r]), mod.value]
                           + [repr(float(v)) for v in vec])


def import_csv(path) -> Population:
    rows: dict = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header[:3] != ["identity_id", "record_id", "modality"]:
            raise ValueError("not a population CSV")
        for row in rd:
            key = (row[0], int(row[1]))
            vals = np.array([float(v) for v in row[3:] if v != ""])
            rows.setdefault(key, {})[Modality(row[2])] = vals
    keys = sorted(rows)
    names = sorted({k[0] for k in keys})
    if all(n.startswith("id") and n[2:].isdigit() for n in names):
        index = {n: int(n[2:]) for n in names}
    else:
        index = {n: i for i, n in enumerate(names)}
    ident = np.array([index[k[0]] for k in keys])
    rec = np.array([k[1] for k in keys])
    bm = np.stack([rows[k][Modality.BIOMETRIC] for k in keys])
    bg = np.stack([rows[k][Modality.BIOGRAPHIC] for k in keys])
    return Population(ident, rec, bm, bg)
