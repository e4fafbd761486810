"""Verification and identification metrics over distance scores (lower = more genuine).

A pair is accepted at threshold ``t`` when its score is ``<= t``.  Rates are
swept over every distinct score value.
"""

from __future__ import annotations

import numpy as np


class ResolutionError(ValueError):
    """Too few impostor scores to resolve the requested false-match rate."""


def _check(genuine, impostor):
    g = np.asarray(genuine, dtype=np.float64).ravel()
    i = np.asarray(impostor, dtype=np.float64).ravel()
    if g.size == 0 or i.size == 0:
        raise ValueError("genuine and impostor score lists must be nonempty")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(i))):
        raise ValueError("scores must be finite")
    return g, i


def sweep(genuine, impostor):
    """``(thresholds, fmr, fnmr)`` at -inf followed by every distinct score."""
    g, i = _check(genuine, impostor)
    g.sort()
    i.sort()
    t = np.unique(np.concatenate([g, i]))
    fmr = np.searchsorted(i, t, side="right") / i.size
    fnmr = 1.0 - np.searchsorted(g, t, side="right") / g.size
    return (np.concatenate([[-np.inf], t]), np.concatenate([[0.0], fmr]),
            np.concatenate([[1.0], fnmr]))


def _crossing(genuine, impostor):
    t, fmr, fnmr = sweep(genuine, impostor)
    d = fnmr - fmr
    j = int(np.argmax(d <= 0))  # d[-1] = -1 <= 0 always holds
    lam = d[j - 1] / (d[j - 1] - d[j])
    return t, fmr, fnmr, j, lam


def eer(genuine, impostor) -> float:
    """Equal error rate, linearly interpolated between the two sweep points that
    bracket the FMR/FNMR crossing."""
    _, fmr, fnmr, j, lam = _crossing(genuine, impostor)
    return float(fmr[j - 1] + lam * (fmr[j] - fmr[j - 1]))


def eer_threshold(genuine, impostor) -> float:
    """Score threshold at the EER crossing (interpolated between adjacent scores)."""
    t, fmr, fnmr, j, lam = _crossing(genuine, impostor)
    d = fnmr - fmr
    if d[j] == 0:
        # rates tie on a whole interval of thresholds; take its midpoint
        k = j + int(np.argmax(d[j:] < 0))
        return float((t[j] + t[k]) / 2)
    if j == 1:
        return float(t[1])
    return float(t[j - 1] + lam * (t[j] - t[j - 1]))


def tpr_at_fmr(genuine, impostor, fmr_target: float) -> float:
    """TPR at the largest threshold whose empirical FMR does not exceed the target."""
    g, i = _check(genuine, impostor)
    if not 0 < fmr_target <= 1:
        raise ValueError("fmr_target must lie in (0, 1]")
    if i.size * fmr_target < 1:
        raise ResolutionError(f"{i.size} impostor scores cannot resolve FMR {fmr_target:g}")
    i.sort()
    k = int(np.floor(fmr_target * i.size + 1e-9))
    if k >= i.size:
        return 1.0
    # smallest impostor value v with #(impostor <= v) > k; accept scores strictly below it
    v = i[k]
    return float(np.count_nonzero(g < v) / g.size)


def roc_points(genuine, impostor) -> list[tuple[float, float]]:
    """``(fpr, tpr)`` pairs, nondecreasing in both coordinates."""
    _, fmr, fnmr = sweep(genuine, impostor)
    return [(float(a), float(1.0 - b)) for a, b in zip(fmr, fnmr)]


def det_points(genuine, impostor) -> list[tuple[float, float]]:
    """``(fmr, fnmr)`` pairs."""
    _, fmr, fnmr = sweep(genuine, impostor)
    return [(float(a), float(b)) for a, b in zip(fmr, fnmr)]


def rank_list(ids, scores) -> list:
    """Ids sorted by ascending score, ties broken by id."""
    order = sorted(range(len(ids)), key=lambda k: (scores[k], ids[k]))
    return [ids[k] for k in order]


def cmc_curve(rank_lists, true_ids, max_rank: int) -> list[float]:
    """Fraction of queries whose true id sits within the top ``r``, for r = 1..max_rank."""
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    if len(rank_lists) != len(true_ids) or not rank_lists:
        raise ValueError("need one rank list per query")
    hits = np.zeros(max_rank)
    for ranks, tid in zip(rank_lists, true_ids):
        ranks = list(ranks)
        if tid not in ranks:
            raise ValueError(f"true id {tid!r} is not in the gallery")
        pos = ranks.index(tid)
        if pos < max_rank:
            hits[pos:] += 1
    return [float(h) for h in hits / len(rank_lists)]
