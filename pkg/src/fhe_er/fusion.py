"""Normalization, distances and the two fusion modes, in plaintext and encrypted form."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import he


class Modality(str, enum.Enum):
    BIOMETRIC = "biometric"
    BIOGRAPHIC = "biographic"
    FUSED = "fused"


DEFAULT_DIM = 128


@dataclass(frozen=True, eq=False)
class ScoreVector:
    modality: Modality
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "modality", Modality(self.modality))
        if not np.all(np.isfinite(v)):
            raise ValueError("score vector has non-finite components")
        if self.normalized and v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("normalized score vector has components outside [0, 1]")

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class NormStats:
    modality: Modality
    min: float
    max: float

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        if not self.max > self.min:
            raise ValueError(f"degenerate normalization range [{self.min}, {self.max}]")

    @property
    def affine(self) -> tuple[float, float]:
        """``(a, b)`` with ``normalized = a*x + b`` before clamping."""
        a = 1.0 / (self.max - self.min)
        return a, -self.min * a

    def to_dict(self) -> dict:
        # repr round-trips a float exactly
        return {"modality": self.modality.value, "min": repr(float(self.min)),
                "max": repr(float(self.max))}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(Modality(d["modality"]), float(d["min"]), float(d["max"]))


@dataclass(frozen=True)
class BiographicRecord:
    pairs: tuple

    def __post_init__(self):
        pairs = tuple((str(a), str(v)) for a, v in self.pairs)
        names = [a for a, _ in pairs]
        if any(not a for a in names):
            raise ValueError("attribute names must be nonempty")
        if len(set(names)) != len(names):
            raise ValueError("attribute repeated in record")
        object.__setattr__(self, "pairs", pairs)


def tokenize_record(rec: BiographicRecord) -> str:
    """Serialize a record as ``[ATT]name[VAL]value...`` keeping attribute order."""
    if not isinstance(rec, BiographicRecord):
        rec = BiographicRecord(tuple(rec))
    if not rec.pairs:
        raise ValueError("cannot tokenize an empty record")
    return "".join(f"[ATT]{a}[VAL]{v}" for a, v in rec.pairs)


def hashed_ngram_features(text: str, dim: int = DEFAULT_DIM, n_min: int = 2,
                          n_max: int = 4) -> np.ndarray:
    """Deterministic signed feature hashing of character n-grams, L2-normalized.

    Stand-in for a learned text encoder: strings sharing most n-grams map to
    nearby vectors.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    v = np.zeros(dim)
    for n in range(n_min, n_max + 1):
        for i in range(len(text) - n + 1):
            h = hashlib.blake2b(text[i:i + n].encode("utf-8"), digest_size=8).digest()
            x = int.from_bytes(h, "little")
            v[x % dim] += 1.0 if (x >> 63) & 1 else -1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def minmax_fit(training_scores, modality) -> NormStats:
    x = np.asarray(training_scores, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least two training values")
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise ValueError("training values are constant; normalization range is degenerate")
    return NormStats(Modality(modality), lo, hi)


def minmax_apply(x, stats: NormStats):
    """Map into [0, 1] with the fitted range; values outside it are clamped."""
    y = np.clip((np.asarray(x, dtype=np.float64) - stats.min) / (stats.max - stats.min), 0.0, 1.0)
    return float(y) if y.ndim == 0 else y


def normalize_template(values, stats: NormStats) -> ScoreVector:
    return ScoreVector(stats.modality, minmax_apply(values, stats), True)


def _vals(v) -> np.ndarray:
    if isinstance(v, ScoreVector):
        return v.values
    return np.asarray(v, dtype=np.float64).ravel()


def squared_distance_plain(q, g) -> float:
    a, b = _vals(q), _vals(g)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    d = a - b
    return float(np.dot(d, d))


def squared_distance_exact(q, g) -> Fraction:
    """``||q - g||^2`` in exact rational arithmetic over the float inputs."""
    a, b = _vals(q), _vals(g)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    total = Fraction(0)
    for x, y in zip(a.tolist(), b.tolist()):
        d = Fraction(x) - Fraction(y)
        total += d * d
    return total


def squared_distance_encrypted(q_ct: he.CipherVector, g_ct: he.CipherVector, dim: int,
                               keys: he.KeySet) -> he.CipherVector:
    """Slot 0 of the result holds ``||q - g||^2`` over the first ``dim`` slots."""
    diff = he.sub(q_ct, g_ct)
    return he.inner_sum(he.square(diff, keys), dim, keys)


def squared_distances_packed(queries, gallery, keys: he.KeySet, width: int | None = None,
                            rng=None) -> np.ndarray:
    """Encrypted ``||q_i - g_i||^2`` for many pairs, returned decrypted.

    Both sides are encrypted block-packed, one pair per block of ``width``
    slots.  After subtracting and squaring, a rotate-and-add fold leaves each
    pair's sum at the start of its block.  Needs the secret key.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.shape != g.shape:
        raise ValueError("queries and gallery must have the same shape")
    w = block_width(q.shape[1]) if width is None else width
    if w < q.shape[1] or not is_power_of_two(w):
        raise ValueError(f"block width {w} cannot hold {q.shape[1]} values")
    blocks = keys.params.slots // w
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    out = np.empty(q.shape[0])
    for start in range(0, q.shape[0], blocks):
        qb = np.zeros((blocks, w))
        gb = np.zeros((blocks, w))
        n = min(blocks, q.shape[0] - start)
        qb[:n, : q.shape[1]] = q[start:start + n]
        gb[:n, : q.shape[1]] = g[start:start + n]
        diff = he.sub(he.encrypt(qb.ravel(), keys, rng=rng), he.encrypt(gb.ravel(), keys, rng=rng))
        acc = he.inner_sum(he.square(diff, keys), w, keys)
        out[start:start + n] = he.decrypt(acc, keys)[::w][:n]
    return out


def score_fuse(s_bm, s_bg):
    out = (np.asarray(s_bm, dtype=np.float64) + np.asarray(s_bg, dtype=np.float64)) / 2.0
    return float(out) if out.ndim == 0 else out


def score_fuse_encrypted(a_ct: he.CipherVector, b_ct: he.CipherVector) -> he.CipherVector:
    """Encrypted average: one addition and one scalar multiply (one level)."""
    return he.mul_const(he.add(a_ct, b_ct), 0.5)


def feature_fuse(s_bm: ScoreVector, s_bg: ScoreVector) -> ScoreVector:
    for v in (s_bm, s_bg):
        if not isinstance(v, ScoreVector) or not v.normalized:
            raise ValueError("feature fusion needs normalized score vectors")
    return ScoreVector(Modality.FUSED, np.concatenate([s_bm.values, s_bg.values]), True)


class ScoreNorm(str, enum.Enum):
    """Where min-max normalization happens before the score-level average.

    ``distance``: per-modality distances are normalized with ranges fitted on
    training distances, then averaged (default).  ``template``: only the
    templates are normalized; distances are divided by their dimension and
    averaged without a fitted range.
    """

    DISTANCE = "distance"
    TEMPLATE = "template"


def score_affine(order: ScoreNorm, dist_stats: NormStats | None, dim: int) -> tuple[float, float]:
    """Affine map ``(a, b)`` taking a raw modality distance to its fused contribution scale."""
    if ScoreNorm(order) is ScoreNorm.DISTANCE:
        if dist_stats is None:
            raise ValueError("distance normalization needs fitted distance stats")
        return dist_stats.affine
    return 1.0 / dim, 0.0


def fused_score_plain(d_bm, d_bg, order: ScoreNorm, stats_bm: NormStats | None,
                      stats_bg: NormStats | None, dims: tuple[int, int], clamp: bool = True):
    """Score-level fused score from raw modality distances."""
    if ScoreNorm(order) is ScoreNorm.DISTANCE and clamp:
        return score_fuse(minmax_apply(d_bm, stats_bm), minmax_apply(d_bg, stats_bg))
    a1, b1 = score_affine(order, stats_bm, dims[0])
    a2, b2 = score_affine(order, stats_bg, dims[1])
    return score_fuse(a1 * np.asarray(d_bm) + b1, a2 * np.asarray(d_bg) + b2)


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def block_width(dim: int) -> int:
    return 1 << max(0, math.ceil(math.log2(max(dim, 1))))
