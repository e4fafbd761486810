"""Experiment runner: unimodal and fused arms, each in plaintext and encrypted form."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import he
from .matcher import (FusionMode, Stores, batch_match, build_policy, enroll, mirror_match,
                      mirror_scores)
from .metrics import (ResolutionError, cmc_curve, det_points, eer, rank_list, roc_points,
                      tpr_at_fmr)
from .synth import Population, PopulationSpec, generate_population, identity_name

FMR_TARGETS = (1e-2, 1e-3)
SCHEMA_VERSION = 1

ARMS = (("biometric", FusionMode.BIOMETRIC_ONLY), ("biographic", FusionMode.BIOGRAPHIC_ONLY),
        ("score_fusion", FusionMode.SCORE_LEVEL), ("feature_fusion", FusionMode.FEATURE_LEVEL))
FLAVORS = ("plain", "encrypted")


@dataclass
class EvalReport:
    arm: str
    flavor: str
    eer: float
    tpr_at_fmr: dict
    roc_points: list
    det_points: list
    cmc: list
    threshold: float
    accept: np.ndarray = field(repr=False, default=None)
    near_margin: np.ndarray = field(repr=False, default=None)
    margin_resolved: int = 0
    domain_resolved: int = 0

    def __post_init__(self):
        rates = [self.eer] + [v for v in self.tpr_at_fmr.values() if v is not None]
        rates += [x for p in self.roc_points + self.det_points for x in p] + list(self.cmc)
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("rates must lie in [0, 1]")
        if any(b < a for a, b in zip(self.cmc, self.cmc[1:])):
            raise ValueError("CMC must be nondecreasing in rank")
        tpr = [t for _, t in self.roc_points]
        fpr = [f for f, _ in self.roc_points]
        if any(b < a for a, b in zip(tpr, tpr[1:])) or any(b < a for a, b in zip(fpr, fpr[1:])):
            raise ValueError("ROC must be nondecreasing")

    @property
    def name(self) -> str:
        return f"{self.arm}/{self.flavor}"

    def to_dict(self, curves: bool = True) -> dict:
        d = {"arm": self.arm, "flavor": self.flavor, "eer": self.eer,
             "tpr_at_fmr": {f"{k:g}": v for k, v in self.tpr_at_fmr.items()},
             "threshold": self.threshold, "cmc_rank1": self.cmc[0] if self.cmc else None,
             "cmc_rank5": self.cmc[4] if len(self.cmc) > 4 else None,
             "accepted": int(self.accept.sum()) if self.accept is not None else None,
             "margin_resolved": self.margin_resolved, "domain_resolved": self.domain_resolved}
        if curves:
            d.update(roc_points=self.roc_points, det_points=self.det_points, cmc=self.cmc)
        return d

    def write_csvs(self, directory):
        os.makedirs(directory, exist_ok=True)
        stem = f"{self.arm}_{self.flavor}"
        for suffix, header, rows in (("roc", ("fpr", "tpr"), self.roc_points),
                                     ("det", ("fmr", "fnmr"), self.det_points),
                                     ("cmc", ("rank", "accuracy"),
                                      [(r + 1, a) for r, a in enumerate(self.cmc)])):
            with open(os.path.join(directory, f"{stem}_{suffix}.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)


@dataclass
class Experiment:
    spec: PopulationSpec
    reports: dict
    decisions_equal: dict

    def report(self, arm: str, flavor: str = "plain") -> EvalReport:
        return self.reports[(arm, flavor)]

    def to_dict(self, curves: bool = False) -> dict:
        return {"schema_version": SCHEMA_VERSION, "spec": self.spec.to_dict(),
                "arms": [r.to_dict(curves) for r in self.reports.values()],
                "decisions_equal": self.decisions_equal}

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "report.json"), "w") as fh:
            json.dump(self.to_dict(curves=True), fh, indent=1)
        for r in self.reports.values():
            r.write_csvs(directory)


def training_seed(seed: int) -> int:
    """Seed for the training population, disjoint from the evaluation stream."""
    return int(np.random.SeedSequence([int(seed), 0x7EA1]).generate_state(1)[0])


def _report(arm, flavor, scores, same, gallery_ids, true_ids, threshold, accept, near,
            margin_resolved=0, domain_resolved=0) -> EvalReport:
    gen, imp = scores[same], scores[~same]
    tpr = {}
    for f in FMR_TARGETS:
        try:
            tpr[f] = tpr_at_fmr(gen, imp, f)
        except ResolutionError:
            tpr[f] = None
    ranks = [rank_list(gallery_ids, list(row)) for row in scores]
    cmc = cmc_curve(ranks, true_ids, len(gallery_ids))
    return EvalReport(arm, flavor, eer(gen, imp), tpr, roc_points(gen, imp), det_points(gen, imp),
                      cmc, threshold, accept, near, margin_resolved, domain_resolved)


def run_experiment(spec: PopulationSpec, policy_grid: dict | None = None,
                   keys: he.KeySet | None = None, encrypted: bool = True,
                   arms=None, max_probes: int | None = None, thread_count: int = 1,
                   seed: int = 0) -> Experiment:
    """Evaluate every arm on the population drawn from ``spec``.

    The first record of each identity is enrolled; every other record probes
    the whole gallery (exhaustive impostor pairs).  Policies are fitted on an
    independent training population from the same spec.  ``policy_grid`` holds
    :func:`build_policy` keyword overrides, either shared or keyed by arm name.
    Encrypted arms need ``keys`` with the secret key.
    """
    if encrypted and keys is None:
        raise ValueError("encrypted arms require keys")
    grid = dict(policy_grid or {})
    names = [a for a, _ in ARMS]
    arms = names if arms is None else list(arms)
    unknown = set(arms) - set(names)
    if unknown:
        raise ValueError(f"unknown arms {sorted(unknown)}")
    pop = generate_population(spec)
    train = generate_population(spec.with_seed(training_seed(spec.seed)))
    gallery, probes = pop.gallery_probe_split()
    if len(probes) == 0:
        raise ValueError("population has no probe records (records_per_identity must allow 2+)")
    if max_probes is not None:
        probes = probes.subset(np.arange(len(probes)) < max_probes)
    gallery_ids = [identity_name(i) for i in gallery.identity]
    true_ids = [identity_name(i) for i in probes.identity]
    same = probes.identity[:, None] == gallery.identity[None, :]
    g_pairs = list(zip(gallery.bm, gallery.bg))
    q_pairs = list(zip(probes.bm, probes.bg))

    reports: dict = {}
    equal: dict = {}
    for arm, mode in ARMS:
        if arm not in arms:
            continue
        opts = grid.get(arm, {k: v for k, v in grid.items() if k not in names})
        policy = build_policy(train.bm, train.bg, train.identity, mode,
                              keys if encrypted else None, train_record=train.record,
                              rng=np.random.default_rng([seed, 1]), **opts)
        scores = mirror_scores(q_pairs, g_pairs, policy)
        plain = mirror_match(q_pairs, gallery_ids, g_pairs, policy)
        p_accept = np.array([[d.accept for d in row] for row in plain], dtype=bool)
        near = np.abs(scores - policy.threshold) < policy.compare_config.margin
        reports[(arm, "plain")] = _report(arm, "plain", scores, same, gallery_ids, true_ids,
                                          policy.threshold, p_accept, near, int(near.sum()))
        if not encrypted:
            continue
        stores = _enroll_all(gallery_ids, gallery, policy, keys, seed)
        dec, _ = batch_match(q_pairs, policy, keys, stores, thread_count, seed=seed)
        c_scores = np.array([[d.distance_score for d in row] for row in dec])
        c_accept = np.array([[d.accept for d in row] for row in dec], dtype=bool)
        rep = _report(arm, "encrypted", c_scores, same, gallery_ids, true_ids, policy.threshold,
                      c_accept, near, sum(d.margin_resolved for r in dec for d in r),
                      sum(d.domain_resolved for r in dec for d in r))
        reports[(arm, "encrypted")] = rep
        equal[arm] = {"outside_margin": bool(np.array_equal(p_accept[~near], c_accept[~near])),
                      "all_pairs": bool(np.array_equal(p_accept, c_accept)),
                      "mismatches": int(np.count_nonzero(p_accept != c_accept)),
                      "eer_equal": reports[(arm, "plain")].eer == rep.eer}
    return Experiment(spec, reports, equal)


def _enroll_all(ids, gallery: Population, policy, keys: he.KeySet, seed: int) -> Stores:
    stores = Stores.empty(keys.params)
    rng = np.random.default_rng([seed, 2])
    for i, entity_id in enumerate(ids):
        enroll(entity_id, gallery.bm[i], gallery.bg[i], policy, keys, stores, rng=rng)
    return stores


def fusion_dominance(spec: PopulationSpec, seeds) -> list[dict]:
    """Plaintext EER per arm for each seed, with a flag for fusion beating both unimodal arms."""
    out = []
    for s in seeds:
        exp = run_experiment(spec.with_seed(int(s)), encrypted=False)
        e = {arm: exp.report(arm).eer for arm, _ in ARMS}
        uni = min(e["biometric"], e["biographic"])
        out.append({"seed": int(s), **e, "score_dominates": e["score_fusion"] < uni,
                    "feature_dominates": e["feature_fusion"] < uni})
    return out
