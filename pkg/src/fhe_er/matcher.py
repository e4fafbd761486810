"""Encrypted enrollment, 1:N verification, identification and batch matching.

Three stores hold one ciphertext per enrolled id: the normalized biometric
template, the normalized biographic template and their concatenation.  At
match time the server packs each store into block-packed ciphertexts (one
template per block, cached), subtracts a tiled encrypted query, squares, and
reduces all blocks with the masked merge tree in :mod:`fhe_er.packing`.  The
normalization affine map is folded into the tree's last mask.  The fused
score is then compared against the encrypted threshold with the iterated
sign polynomial.  The key holder decrypts the score set and the comparator
output.

A plaintext mirror computes the same decisions in float64 from the plaintext
templates and serves as the equivalence oracle.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import enum
import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import he
from .compare import CompareConfig, comp_from_difference, comp_plain
from .fusion import (DEFAULT_DIM, Modality, NormStats, ScoreNorm, block_width, minmax_apply,
                     minmax_fit, score_affine, score_fuse)
from .he.serialize import peek_digest
from .metrics import eer_threshold
from .packing import BlockLayout, MaskCache, merge_tree, pack_blocks

# |threshold - score| beyond this leaves the stable domain of the sign iteration
COMPARATOR_DOMAIN = 1.7
# slack for HE noise when deciding whether the comparator output saturated
_SATURATION_SLACK = 2.0 ** -10


class FusionMode(str, enum.Enum):
    SCORE_LEVEL = "score_level"
    FEATURE_LEVEL = "feature_level"
    BIOMETRIC_ONLY = "biometric_only"
    BIOGRAPHIC_ONLY = "biographic_only"


class StoreError(Exception):
    pass


class ConflictError(StoreError):
    pass


class PolicyError(ValueError):
    pass


class MatchError(he.DepthError):
    """A matcher failure tied to a gallery entry."""

    def __init__(self, msg, entity_id=None, required=None, available=None):
        super().__init__(msg, required=required, available=available)
        self.entity_id = entity_id


# ---------------------------------------------------------------------------
# stores

_ID_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_.-]{0,127}$")
MANIFEST = "manifest.json"


def check_entity_id(entity_id: str) -> str:
    if not isinstance(entity_id, str) or not _ID_RE.match(entity_id):
        raise StoreError(f"invalid entity id {entity_id!r} (letters, digits, '_', '.', '-')")
    return entity_id


def _key_tag(keys: he.KeySet) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(keys.public_key[0][0]).tobytes()).digest()[:16]


class GalleryStore:
    """Serialized ciphertexts for one modality, keyed by entity id (insertion ordered)."""

    def __init__(self, modality, params_digest: bytes):
        self.modality = Modality(modality)
        self.params_digest = bytes(params_digest)
        self.entries: dict[str, bytes] = {}
        self._packed: dict = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, entity_id):
        return entity_id in self.entries

    def ids(self) -> list[str]:
        return list(self.entries)

    def ciphertext(self, entity_id: str, params: he.HeParams) -> he.CipherVector:
        return he.load_ciphertext(self.entries[entity_id], params)

    def _put(self, entity_id: str, blob: bytes):
        if peek_digest(blob) != self.params_digest:
            raise StoreError(f"ciphertext for {entity_id!r} uses different parameters")
        self.entries[entity_id] = blob
        self._packed.clear()

    def _remove(self, entity_id: str):
        self.entries.pop(entity_id, None)
        self._packed.clear()

    def packed(self, layout: BlockLayout, params: he.HeParams, keys: he.KeySet):
        """Block-packed view of the store (cached until the store changes)."""
        ids = tuple(self.entries)
        key = (layout.width, ids, _key_tag(keys))
        with self._lock:
            hit = self._packed.get(key)
        if hit is not None:
            return hit
        cts = []
        for start in range(0, len(ids), layout.blocks):
            chunk = [self.ciphertext(i, params) for i in ids[start:start + layout.blocks]]
            cts.append(pack_blocks(chunk, layout, keys))
        with self._lock:
            self._packed[key] = cts
        return cts

    # -- persistence ------------------------------------------------------
    def save(self, directory):
        """Write new ``<id>.ct`` files, then replace the manifest atomically."""
        os.makedirs(directory, exist_ok=True)
        for entity_id, blob in self.entries.items():
            path = os.path.join(directory, f"{entity_id}.ct")
            if not os.path.exists(path):
                tmp = path + ".tmp"
                with open(tmp, "wb") as fh:
                    fh.write(blob)
                os.replace(tmp, path)
        manifest = {"format": 1, "modality": self.modality.value,
                    "params_digest": self.params_digest.hex(), "ids": self.ids()}
        tmp = os.path.join(directory, MANIFEST + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=1)
        os.replace(tmp, os.path.join(directory, MANIFEST))

    @classmethod
    def load(cls, directory) -> "GalleryStore":
        with open(os.path.join(directory, MANIFEST)) as fh:
            m = json.load(fh)
        store = cls(Modality(m["modality"]), bytes.fromhex(m["params_digest"]))
        for entity_id in m["ids"]:
            with open(os.path.join(directory, f"{check_entity_id(entity_id)}.ct"), "rb") as fh:
                store._put(entity_id, fh.read())
        return store


@dataclass
class Stores:
    biometric: GalleryStore
    biographic: GalleryStore
    fused: GalleryStore

    @classmethod
    def empty(cls, params: he.HeParams) -> "Stores":
        d = params.digest
        return cls(GalleryStore(Modality.BIOMETRIC, d), GalleryStore(Modality.BIOGRAPHIC, d),
                   GalleryStore(Modality.FUSED, d))

    def all(self) -> tuple[GalleryStore, GalleryStore, GalleryStore]:
        return self.biometric, self.biographic, self.fused

    def get(self, modality) -> GalleryStore:
        return {Modality.BIOMETRIC: self.biometric, Modality.BIOGRAPHIC: self.biographic,
                Modality.FUSED: self.fused}[Modality(modality)]

    def ids(self) -> list[str]:
        ids = self.biometric.ids()
        if self.biographic.ids() != ids or self.fused.ids() != ids:
            raise StoreError("the three stores hold different id sets")
        return ids

    def __len__(self):
        return len(self.biometric)

    def save(self, root):
        for s in self.all():
            s.save(os.path.join(root, s.modality.value))

    @classmethod
    def load(cls, root) -> "Stores":
        parts = [GalleryStore.load(os.path.join(root, m.value)) for m in Modality]
        stores = cls(*parts)
        stores.ids()
        return stores

    @classmethod
    def open(cls, root, params: he.HeParams) -> "Stores":
        """Load the stores under ``root`` or start empty ones."""
        if os.path.exists(os.path.join(root, Modality.BIOMETRIC.value, MANIFEST)):
            stores = cls.load(root)
            if stores.biometric.params_digest != params.digest:
                raise StoreError("stores were created under different parameters")
            return stores
        return cls.empty(params)


# ---------------------------------------------------------------------------
# policy

TEMPLATE_BM, TEMPLATE_BG = "template_biometric", "template_biographic"
DIST_BM, DIST_BG, DIST_FUSED = "distance_biometric", "distance_biographic", "distance_fused"


@dataclass(frozen=True, eq=False)
class MatchPolicy:
    fusion_mode: FusionMode
    threshold: float
    norm_stats: dict
    compare_config: CompareConfig = field(default_factory=CompareConfig)
    score_norm: ScoreNorm = ScoreNorm.DISTANCE
    dims: tuple[int, int] = (DEFAULT_DIM, DEFAULT_DIM)
    threshold_ct: he.CipherVector | None = None

    def __post_init__(self):
        object.__setattr__(self, "fusion_mode", FusionMode(self.fusion_mode))
        object.__setattr__(self, "score_norm", ScoreNorm(self.score_norm))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not 0.0 <= self.threshold <= 1.0:
            raise PolicyError(f"threshold must lie in [0, 1], got {self.threshold}")
        for k in (TEMPLATE_BM, TEMPLATE_BG):
            if k not in self.norm_stats:
                raise PolicyError(f"policy lacks normalization stats {k!r}")

    def stats(self, name: str) -> NormStats:
        try:
            return self.norm_stats[name]
        except KeyError:
            raise PolicyError(f"policy lacks normalization stats {name!r}") from None

    def with_encrypted_threshold(self, keys: he.KeySet, rng=None) -> "MatchPolicy":
        ct = he.encrypt(np.full(keys.params.slots, self.threshold), keys, rng=rng)
        return replace(self, threshold_ct=ct)

    # -- score definition ----------------------------------------------
    def terms(self) -> tuple[list[tuple[Modality, float]], float]:
        """Encrypted score as ``sum(weight * distance(modality)) + offset``."""
        mode = self.fusion_mode
        if mode is FusionMode.FEATURE_LEVEL:
            a, b = self.stats(DIST_FUSED).affine
            return [(Modality.FUSED, a)], b
        if mode is FusionMode.BIOMETRIC_ONLY:
            a, b = self.stats(DIST_BM).affine
            return [(Modality.BIOMETRIC, a)], b
        if mode is FusionMode.BIOGRAPHIC_ONLY:
            a, b = self.stats(DIST_BG).affine
            return [(Modality.BIOGRAPHIC, a)], b
        dist = self.score_norm is ScoreNorm.DISTANCE
        a1, b1 = score_affine(self.score_norm, self.norm_stats.get(DIST_BM) if dist else None,
                              self.dims[0])
        a2, b2 = score_affine(self.score_norm, self.norm_stats.get(DIST_BG) if dist else None,
                              self.dims[1])
        return [(Modality.BIOMETRIC, a1 / 2), (Modality.BIOGRAPHIC, a2 / 2)], (b1 + b2) / 2

    def plain_score(self, d_bm, d_bg, clamp: bool = True):
        """Plaintext score from raw per-modality distances (arrays broadcast)."""
        d_bm = np.asarray(d_bm, dtype=np.float64)
        d_bg = np.asarray(d_bg, dtype=np.float64)
        mode = self.fusion_mode
        if not clamp:
            terms, off = self.terms()
            dist = {Modality.BIOMETRIC: d_bm, Modality.BIOGRAPHIC: d_bg,
                    Modality.FUSED: d_bm + d_bg}
            return sum(w * dist[m] for m, w in terms) + off
        if mode is FusionMode.FEATURE_LEVEL:
            return minmax_apply(d_bm + d_bg, self.stats(DIST_FUSED))
        if mode is FusionMode.BIOMETRIC_ONLY:
            return minmax_apply(d_bm, self.stats(DIST_BM))
        if mode is FusionMode.BIOGRAPHIC_ONLY:
            return minmax_apply(d_bg, self.stats(DIST_BG))
        if self.score_norm is ScoreNorm.DISTANCE:
            return score_fuse(minmax_apply(d_bm, self.stats(DIST_BM)),
                              minmax_apply(d_bg, self.stats(DIST_BG)))
        return score_fuse(np.clip(d_bm / self.dims[0], 0, 1), np.clip(d_bg / self.dims[1], 0, 1))

    def normalize(self, bm, bg) -> tuple[np.ndarray, np.ndarray]:
        """Clamp-normalize raw templates with the fitted template ranges."""
        bm = np.asarray(bm, dtype=np.float64)
        bg = np.asarray(bg, dtype=np.float64)
        if bm.shape[-1] != self.dims[0] or bg.shape[-1] != self.dims[1]:
            raise ValueError(f"templates must have dimensions {self.dims}, got "
                             f"{bm.shape[-1]} and {bg.shape[-1]}")
        return (np.asarray(minmax_apply(bm, self.stats(TEMPLATE_BM))),
                np.asarray(minmax_apply(bg, self.stats(TEMPLATE_BG))))

    # -- persistence -----------------------------------------------------
    def to_dict(self) -> dict:
        return {"format": 1, "fusion_mode": self.fusion_mode.value,
                "threshold": repr(float(self.threshold)),
                "norm_stats": {k: v.to_dict() for k, v in self.norm_stats.items()},
                "compare_config": self.compare_config.to_dict(),
                "score_norm": self.score_norm.value, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "MatchPolicy":
        return cls(FusionMode(d["fusion_mode"]), float(d["threshold"]),
                   {k: NormStats.from_dict(v) for k, v in d["norm_stats"].items()},
                   CompareConfig.from_dict(d["compare_config"]), ScoreNorm(d["score_norm"]),
                   tuple(d["dims"]))

    def save(self, path):
        """Policy JSON at ``path``; the encrypted threshold goes to ``path + '.ct'``."""
        path = os.fspath(path)
        d = self.to_dict()
        if self.threshold_ct is not None:
            d["threshold_ct_file"] = os.path.basename(path) + ".ct"
            d["params_digest"] = self.threshold_ct.params.digest.hex()
            with open(path + ".ct", "wb") as fh:
                fh.write(he.dump_ciphertext(self.threshold_ct))
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1)

    @classmethod
    def load(cls, path, params: he.HeParams | None = None) -> "MatchPolicy":
        path = os.fspath(path)
        with open(path) as fh:
            d = json.load(fh)
        pol = cls.from_dict(d)
        if params is not None and d.get("threshold_ct_file"):
            ct_path = os.path.join(os.path.dirname(path), d["threshold_ct_file"])
            with open(ct_path, "rb") as fh:
                pol = replace(pol, threshold_ct=he.load_ciphertext(fh.read(), params))
        return pol


def _pair_distances(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Exact ``||q_i - g_j||^2`` for all pairs, shape (len(q), len(g))."""
    diff = q[:, None, :] - g[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def build_policy(train_bm, train_bg, train_identity, fusion_mode, keys: he.KeySet | None = None,
                 compare_config: CompareConfig | None = None,
                 score_norm: ScoreNorm = ScoreNorm.DISTANCE, threshold: float | None = None,
                 train_record=None, rng=None) -> MatchPolicy:
    """Fit normalization ranges and the EER threshold on a training split.

    Gallery/probe pairs come from the training records: the first record of
    each identity is its gallery entry, the rest probe every gallery entry
    (exhaustive impostor pairs).
    """
    train_bm = np.asarray(train_bm, dtype=np.float64)
    train_bg = np.asarray(train_bg, dtype=np.float64)
    ident = np.asarray(train_identity)
    cfg = compare_config or CompareConfig()
    stats = {TEMPLATE_BM: minmax_fit(train_bm.ravel(), Modality.BIOMETRIC),
             TEMPLATE_BG: minmax_fit(train_bg.ravel(), Modality.BIOGRAPHIC)}
    nbm = np.asarray(minmax_apply(train_bm, stats[TEMPLATE_BM]))
    nbg = np.asarray(minmax_apply(train_bg, stats[TEMPLATE_BG]))
    if train_record is None:
        first = np.zeros(ident.shape[0], dtype=bool)
        _, idx = np.unique(ident, return_index=True)
        first[idx] = True
    else:
        first = np.asarray(train_record) == 0
    gal, prb = np.where(first)[0], np.where(~first)[0]
    if prb.size == 0:
        raise PolicyError("training split needs identities with at least two records")
    d_bm = _pair_distances(nbm[prb], nbm[gal])
    d_bg = _pair_distances(nbg[prb], nbg[gal])
    stats[DIST_BM] = minmax_fit(d_bm.ravel(), Modality.BIOMETRIC)
    stats[DIST_BG] = minmax_fit(d_bg.ravel(), Modality.BIOGRAPHIC)
    stats[DIST_FUSED] = minmax_fit((d_bm + d_bg).ravel(), Modality.FUSED)
    pol = MatchPolicy(FusionMode(fusion_mode), 0.5, stats, cfg, ScoreNorm(score_norm),
                      (train_bm.shape[1], train_bg.shape[1]))
    scores = pol.plain_score(d_bm, d_bg)
    same = ident[prb][:, None] == ident[gal][None, :]
    gen, imp = scores[same], scores[~same]
    if gen.size == 0 or imp.size == 0:
        raise PolicyError("training split yields no genuine or no impostor pairs")
    t = eer_threshold(gen, imp) if threshold is None else float(threshold)
    t = min(max(t, 0.0), 1.0)
    for name, mean in (("genuine", float(gen.mean())), ("impostor", float(imp.mean()))):
        if abs(t - mean) < cfg.margin:
            raise PolicyError(f"threshold {t:.4f} lies within the comparator margin of the "
                              f"{name} score mean {mean:.4f}")
    pol = replace(pol, threshold=t)
    if keys is not None:
        pol = pol.with_encrypted_threshold(keys, rng)
    return pol


# ---------------------------------------------------------------------------
# enrollment


def enroll(entity_id: str, bm_template, bg_template, policy: MatchPolicy, keys: he.KeySet,
           stores: Stores, rng=None) -> Stores:
    """Encrypt the three normalized templates and add them to all stores, or none."""
    check_entity_id(entity_id)
    params = keys.params
    for s in stores.all():
        if s.params_digest != params.digest:
            raise StoreError(f"{s.modality.value} store uses different parameters")
        if entity_id in s:
            raise ConflictError(f"id {entity_id!r} is already enrolled")
    nbm, nbg = policy.normalize(np.ravel(bm_template), np.ravel(bg_template))
    fused = np.concatenate([nbm, nbg])
    if fused.shape[0] > params.slots:
        raise ValueError("templates do not fit the slot count")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    blobs = [he.dump_ciphertext(he.encrypt(v, keys, rng=rng)) for v in (nbm, nbg, fused)]
    done = []
    try:
        for store, blob in zip(stores.all(), blobs):
            store._put(entity_id, blob)
            done.append(store)
    except Exception:
        for store in done:
            store._remove(entity_id)
        raise
    return stores


# ---------------------------------------------------------------------------
# matching


@dataclass(frozen=True)
class MatchDecision:
    entity_id: str
    distance_score: float
    comp_output: float
    accept: bool
    margin_resolved: bool = False
    domain_resolved: bool = False
    flavor: str = "ciphertext"

    def to_dict(self) -> dict:
        return {"entity_id": self.entity_id, "distance_score": self.distance_score,
                "comp_output": self.comp_output, "accept": self.accept,
                "margin_resolved": self.margin_resolved,
                "domain_resolved": self.domain_resolved, "flavor": self.flavor}


@dataclass
class TimingReport:
    threads: int
    elapsed_ms: float
    cpu_ms: float
    pairs: int
    unit_latency_ms: list = field(default_factory=list)
    unit_pairs: list = field(default_factory=list)

    @property
    def pairs_per_sec(self) -> float:
        return self.pairs / (self.elapsed_ms / 1000.0) if self.elapsed_ms > 0 else float("inf")

    def latency_summary(self) -> dict:
        """Per-pair latency (ms) over work units: each unit's time divided by its pairs."""
        per = np.array([t / max(p, 1) for t, p in zip(self.unit_latency_ms, self.unit_pairs)])
        if per.size == 0:
            return {}
        return {"mean": float(per.mean()), "p50": float(np.percentile(per, 50)),
                "p90": float(np.percentile(per, 90)), "p99": float(np.percentile(per, 99)),
                "max": float(per.max())}

    def row(self) -> dict:
        return {"threads": self.threads, "elapsed_ms": round(self.elapsed_ms, 3),
                "cpu_ms": round(self.cpu_ms, 3), "pairs": self.pairs,
                "pairs_per_sec": round(self.pairs_per_sec, 3)}


CSV_FIELDS = ["threads", "elapsed_ms", "cpu_ms", "pairs", "pairs_per_sec"]


def write_timing_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


@dataclass
class _PairResult:
    query: int
    gallery: int
    score: float
    comp: float | None
    in_domain: bool


_MOD_CODE = {Modality.BIOMETRIC: 1, Modality.BIOGRAPHIC: 2, Modality.FUSED: 3}


class _Engine:
    """Shared state for one matching run: packed views, masks, keys and queries."""

    def __init__(self, queries, policy: MatchPolicy, keys: he.KeySet, stores: Stores,
                 seed, with_comparator: bool):
        self.policy = policy
        self.keys = keys
        self.server_keys = keys.public()
        self.params = keys.params
        self.ids = stores.ids()
        self.with_comp = with_comparator
        self.seed = seed
        self.terms, self.offset = policy.terms()
        self.queries = [policy.normalize(np.ravel(b), np.ravel(g)) for b, g in queries]
        slots = self.params.slots
        widths = {m: block_width(self._dim(m)) for m, _ in self.terms}
        if len(set(widths.values())) != 1:
            raise PolicyError("score-level fusion needs equal block widths for both modalities")
        self.layout = BlockLayout(slots, next(iter(widths.values())))
        if with_comparator:
            if policy.threshold_ct is None:
                raise PolicyError("policy has no encrypted threshold")
            need = 1 + self.layout.height + policy.compare_config.depth
        else:
            need = 1 + self.layout.height
        if need > self.params.levels:
            first = self.ids[0] if self.ids else None
            raise MatchError(f"matching needs {need} levels, parameters provide "
                             f"{self.params.levels} (entity {first})", entity_id=first,
                             required=need, available=self.params.levels)
        self.views = {m: stores.get(m).packed(self.layout, self.params, self.server_keys)
                      for m, _ in self.terms}
        self.n_packed = len(self.views[self.terms[0][0]])
        self.masks = {m: MaskCache(self.params, self.layout) for m, _ in self.terms}
        self._thr: dict = {}
        self._thr_lock = threading.Lock()

    def _dim(self, m: Modality) -> int:
        d_bm, d_bg = self.policy.dims
        return {Modality.BIOMETRIC: d_bm, Modality.BIOGRAPHIC: d_bg,
                Modality.FUSED: d_bm + d_bg}[m]

    def units(self, unit_size: int | None = None) -> list[list[tuple[int, int]]]:
        sources = [(qi, k) for qi in range(len(self.queries)) for k in range(self.n_packed)]
        w = self.layout.width if unit_size is None else unit_size
        if not 1 <= w <= self.layout.width:
            raise ValueError(f"unit_size must lie in [1, {self.layout.width}]")
        return [sources[i:i + w] for i in range(0, len(sources), w)]

    def _query_values(self, qi: int, m: Modality) -> np.ndarray:
        bm, bg = self.queries[qi]
        return {Modality.BIOMETRIC: bm, Modality.BIOGRAPHIC: bg,
                Modality.FUSED: np.concatenate([bm, bg])}[m]

    def encrypt_query(self, qi: int, m: Modality) -> he.CipherVector:
        # client side: public key only, randomness fixed per (seed, query, modality)
        rng = np.random.default_rng([self.seed, qi, _MOD_CODE[m]])
        return he.encrypt(self.layout.tile(self._query_values(qi, m)), self.keys.public(), rng=rng)

    def _valid(self, src) -> np.ndarray:
        _, k = src
        g = k * self.layout.blocks + np.arange(self.layout.blocks)
        return g < len(self.ids)

    def _threshold_at(self, level: int) -> he.CipherVector:
        with self._thr_lock:
            hit = self._thr.get(level)
        if hit is None:
            hit = he.drop_level(self.policy.threshold_ct, level)
            with self._thr_lock:
                self._thr[level] = hit
        return hit

    def run_unit(self, unit) -> list[_PairResult]:
        ev = self.server_keys
        roots, sources = [], None
        for m, weight in self.terms:
            packed = self.views[m]

            def leaves(m=m, packed=packed):
                cur_q, q_ct = None, None
                for qi, k in unit:
                    if qi != cur_q:
                        cur_q, q_ct = qi, self.encrypt_query(qi, m)
                    yield (qi, k), he.square(he.sub(q_ct, packed[k]), ev)

            root, src = merge_tree(leaves(), self.layout, ev, self.masks[m], weight, self._valid)
            roots.append(root)
            sources = src
        score = roots[0]
        for r in roots[1:]:
            score = he.add(score, r)
        # the offset goes only where a real pair sits; padding slots get the
        # threshold so the comparator sees exactly zero there
        valid = np.zeros((self.layout.blocks, self.layout.width), dtype=bool)
        for s, src in enumerate(sources):
            if src is not None:
                valid[:, s] = self._valid(src)
        valid = valid.ravel()
        fill = np.where(valid, self.offset, self.policy.threshold).astype(np.float64)
        score = he.add_const(score, fill)
        comp_ct = None
        if self.with_comp:
            x = he.sub(self._threshold_at(score.level), score)
            comp_ct = comp_from_difference(x, self.policy.compare_config, ev)
        # key holder
        slots = self.params.slots
        s_dec = he.decrypt(score, self.keys, n=slots)
        c_dec = he.decrypt(comp_ct, self.keys, n=slots) if comp_ct is not None else None
        out = []
        w, nb = self.layout.width, self.layout.blocks
        trusted = True
        if c_dec is not None:
            xs = self.policy.threshold - s_dec[valid]
            cv = c_dec[valid]
            trusted = bool(np.all(np.abs(xs) < COMPARATOR_DOMAIN)
                           and np.all((cv > -0.05) & (cv < 1.05)))
        for s, src in enumerate(sources):
            if src is None:
                continue
            qi, k = src
            for b in range(nb):
                gi = k * nb + b
                if gi >= len(self.ids):
                    break
                slot = b * w + s
                comp = float(c_dec[slot]) if c_dec is not None else None
                out.append(_PairResult(qi, gi, float(s_dec[slot]), comp, trusted))
        return out


def _decisions(engine: _Engine, results: list[_PairResult]) -> list[list[MatchDecision]]:
    pol = engine.policy
    te = pol.compare_config.target_error
    lo, hi = te / 2 + _SATURATION_SLACK, 1 - te / 2 - _SATURATION_SLACK
    n_q, n_g = len(engine.queries), len(engine.ids)
    grid: list[list[MatchDecision | None]] = [[None] * n_g for _ in range(n_q)]
    for r in results:
        if r.comp is None:
            continue
        comp = r.comp
        if not r.in_domain:
            # comparator input left its stable domain somewhere in this ciphertext:
            # the key holder reruns the comparator on the decrypted score
            s = min(max(r.score, 0.0), 1.0)
            comp = float(comp_plain(pol.threshold, s, pol.compare_config))
        resolved = not (comp <= lo or comp >= hi)
        grid[r.query][r.gallery] = MatchDecision(engine.ids[r.gallery], r.score, comp,
                                                 bool(comp > 0.5), bool(resolved),
                                                 not r.in_domain)
    return grid


def _run(engine: _Engine, thread_count: int = 1, unit_size: int | None = None):
    units = engine.units(unit_size)
    lat, npairs = [], []

    def work(unit):
        t0 = time.perf_counter()
        res = engine.run_unit(unit)
        return res, (time.perf_counter() - t0) * 1000.0, len(res)

    if thread_count <= 1:
        outs = [work(u) for u in units]
    else:
        with cf.ThreadPoolExecutor(max_workers=thread_count) as pool:
            outs = list(pool.map(work, units))
    results = []
    for res, ms, n in outs:
        results.extend(res)
        lat.append(ms)
        npairs.append(n)
    return results, lat, npairs


def verify_1n(query_bm, query_bg, policy: MatchPolicy, keys: he.KeySet, stores: Stores,
              seed: int | None = None) -> list[MatchDecision]:
    """Match one query against every enrolled id; one decision per gallery entry."""
    if len(stores) == 0:
        return []
    seed = int(np.random.SeedSequence().entropy % (1 << 63)) if seed is None else seed
    engine = _Engine([(query_bm, query_bg)], policy, keys, stores, seed, True)
    results, _, _ = _run(engine)
    return _decisions(engine, results)[0]


def identify(query_bm, query_bg, policy: MatchPolicy, keys: he.KeySet, stores: Stores, k: int,
             seed: int | None = None) -> list[str]:
    """Top-``k`` ids by ascending decrypted score (ties by id)."""
    n = len(stores)
    if not 1 <= k <= max(n, 1) or n == 0:
        raise ValueError(f"k must lie in [1, {n}] for a gallery of {n}")
    seed = int(np.random.SeedSequence().entropy % (1 << 63)) if seed is None else seed
    engine = _Engine([(query_bm, query_bg)], policy, keys, stores, seed, False)
    results, _, _ = _run(engine)
    scored = sorted(((r.score, engine.ids[r.gallery]) for r in results))
    return [i for _, i in scored[:k]]


def score_sets(queries, policy: MatchPolicy, keys: he.KeySet, stores: Stores, seed: int = 0,
               thread_count: int = 1) -> np.ndarray:
    """Decrypted 1:N score matrix (queries x gallery) without the comparator."""
    engine = _Engine(queries, policy, keys, stores, seed, False)
    results, _, _ = _run(engine, thread_count)
    out = np.full((len(engine.queries), len(engine.ids)), np.nan)
    for r in results:
        out[r.query, r.gallery] = r.score
    return out


def batch_match(queries, policy: MatchPolicy, keys: he.KeySet, stores: Stores,
                thread_count: int = 1, seed: int = 0, unit_size: int | None = None):
    """Match many queries; returns ``(decisions[query][gallery], TimingReport)``.

    Work units are fixed slices of ``unit_size`` (query, packed gallery) pairs
    (default: one block width), so the result does not depend on
    ``thread_count``.  Smaller units expose more parallelism on small batches
    at the price of more comparator evaluations.
    """
    if thread_count < 1:
        raise ValueError("thread_count must be >= 1")
    queries = list(queries)
    if len(stores) == 0 or not queries:
        return [[] for _ in queries], TimingReport(thread_count, 0.0, 0.0, 0)
    t0, c0 = time.perf_counter(), time.process_time()
    engine = _Engine(queries, policy, keys, stores, seed, True)
    results, lat, npairs = _run(engine, thread_count, unit_size)
    decisions = _decisions(engine, results)
    elapsed = (time.perf_counter() - t0) * 1000.0
    cpu = (time.process_time() - c0) * 1000.0
    report = TimingReport(thread_count, elapsed, cpu, len(queries) * len(engine.ids), lat, npairs)
    return decisions, report


# ---------------------------------------------------------------------------
# plaintext mirror


def mirror_scores(queries, gallery, policy: MatchPolicy) -> np.ndarray:
    """Plaintext score matrix from raw query and gallery templates."""
    q = [policy.normalize(np.ravel(b), np.ravel(g)) for b, g in queries]
    gl = [policy.normalize(np.ravel(b), np.ravel(g)) for b, g in gallery]
    if not q or not gl:
        return np.zeros((len(q), len(gl)))
    qb, qg = np.stack([a for a, _ in q]), np.stack([b for _, b in q])
    gb, gg = np.stack([a for a, _ in gl]), np.stack([b for _, b in gl])
    return policy.plain_score(_pair_distances(qb, gb), _pair_distances(qg, gg))


def mirror_match(queries, gallery_ids, gallery, policy: MatchPolicy) -> list[list[MatchDecision]]:
    """Plaintext decisions: comp(threshold, score) on the clamped score."""
    scores = mirror_scores(queries, gallery, policy)
    cfg = policy.compare_config
    out = []
    for row in scores:
        comp = np.asarray(comp_plain(np.full(row.shape, policy.threshold), row, cfg))
        near = np.abs(policy.threshold - row) < cfg.margin
        out.append([MatchDecision(i, float(s), float(c), bool(c > 0.5), bool(m), "plaintext")
                    for i, s, c, m in zip(gallery_ids, row, comp, near)])
    return out
