"""Independent reference implementations used by the evaluation tests."""

from fractions import Fraction

import numpy as np


def brute_threshold(scores, labels):
    """Exhaustive search with exact rational distances; first minimum wins."""
    scores = [float(s) for s in scores]
    distinct = sorted(set(scores))
    cands = sorted({0.0, 1.0} | {(a + b) / 2 for a, b in zip(distinct, distinct[1:])})
    P = sum(1 for y in labels if y == 1)
    N = len(labels) - P
    best, best_t = None, None
    for t in cands:
        tp = sum(1 for s, y in zip(scores, labels) if y == 1 and s >= t)
        fp = sum(1 for s, y in zip(scores, labels) if y == 0 and s >= t)
        d = (Fraction(fp, N)) ** 2 + (1 - Fraction(tp, P)) ** 2
        if best is None or d < best:
            best, best_t = d, t
    return best_t


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def trapezoid_auc(scores, labels):
    s = np.asarray(scores, float)
    y = np.asarray(labels)
    P, N = (y == 1).sum(), (y == 0).sum()
    xs, ys = [0.0], [0.0]
    for t in np.unique(s)[::-1]:
        xs.append(((s >= t) & (y == 0)).sum() / N)
        ys.append(((s >= t) & (y == 1)).sum() / P)
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    return float(trapezoid(ys, xs))


def random_scores(rng, n=None, ties=False):
    n = n or int(rng.integers(2, 60))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    if ties:
        s = rng.integers(0, 6, n) / 5.0
    else:
        s = rng.random(n)
    return s, y
