"""Brute-force reference implementations shared by the metric and acceptance tests."""

import numpy as np


def brute_rates(genuine, impostor):
    """Rates at -inf and every distinct score, counted pair by pair."""
    ts = [-np.inf] + sorted(set(list(genuine) + list(impostor)))
    pts = []
    for t in ts:
        fm = sum(1 for s in impostor if s <= t) / len(impostor)
        fnm = sum(1 for s in genuine if s > t) / len(genuine)
        pts.append((fm, fnm))
    return pts


def dense_eer(genuine, impostor, samples=100_000):
    """Sample the rate polyline densely and read the rates where they are closest."""
    pts = np.array(brute_rates(genuine, impostor))
    seg = len(pts) - 1
    u = np.linspace(0, seg, samples)
    k = np.minimum(u.astype(int), seg - 1)
    f = u - k
    fm = pts[k, 0] + f * (pts[k + 1, 0] - pts[k, 0])
    fnm = pts[k, 1] + f * (pts[k + 1, 1] - pts[k, 1])
    i = int(np.argmin(np.abs(fnm - fm)))
    return (fm[i] + fnm[i]) / 2


def brute_tpr(genuine, impostor, target):
    best = -np.inf
    for t in [-np.inf] + sorted(set(list(genuine) + list(impostor))):
        if sum(1 for s in impostor if s <= t) / len(impostor) <= target + 1e-12:
            best = max(best, t)
    return sum(1 for s in genuine if s <= best) / len(genuine)


def brute_cmc(score_rows, gallery_ids, true_ids, max_rank):
    acc = []
    for r in range(1, max_rank + 1):
        hits = 0
        for row, tid in zip(score_rows, true_ids):
            mine = row[gallery_ids.index(tid)]
            better = sum(1 for s, g in zip(row, gallery_ids) if (s, g) < (mine, tid))
            hits += better < r
        acc.append(hits / len(true_ids))
    return acc


def random_sets(seed):
    r = np.random.default_rng(seed)
    ng, ni = r.integers(5, 40), r.integers(100, 400)
    gen = r.normal(0.3, 0.15, ng)
    imp = r.normal(0.6, 0.15, ni)
    return gen, imp
