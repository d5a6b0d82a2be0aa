"""Independent reference implementations used as test oracles.

Each oracle is written from the defining formula in plain Python (exact
``Fraction`` arithmetic where that is possible) and shares no code with
the package under test.
"""

from fractions import Fraction
from itertools import product
import math
import statistics

import numpy as np


def weights_oracle(agreement, tau=Fraction(1, 2), alpha=Fraction(1, 10), eps=Fraction(1, 10)):
    c = Fraction(agreement)
    return (c - tau + eps, alpha * (1 - c + eps), Fraction(1))


def reasoning_oracle(agreement, s_lab, s_cue, tau=Fraction(1, 2), eps=Fraction(1, 10)):
    c = Fraction(agreement)
    num = (c - tau + eps) * Fraction(s_lab) + (1 - c + eps) * Fraction(s_cue)
    return num / (1 - tau + 2 * eps)


def mae_oracle(model, human):
    return sum(abs(Fraction(m) - Fraction(h)) for m, h in zip(model, human)) / 2


def advantages_oracle(rewards, eps_adv=0.1):
    mu = statistics.fmean(rewards)
    sd = statistics.pstdev(rewards)
    return [(r - mu) / (sd + eps_adv) for r in rewards]


def pearson_oracle(x, y):
    """Textbook sums-of-products formula."""
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxx = sum(v * v for v in x)
    syy = sum(v * v for v in y)
    sxy = sum(a * b for a, b in zip(x, y))
    return (n * sxy - sx * sy) / math.sqrt((n * sxx - sx ** 2) * (n * syy - sy ** 2))


def confusion_oracle(gold, pred, classes=("pos", "neg")):
    """Accuracy and macro-F1 from an explicit confusion matrix."""
    m = {(g, p): 0 for g in classes for p in classes + (None,)}
    for g, p in zip(gold, pred):
        m[(g, p)] += 1
    acc = Fraction(sum(m[(c, c)] for c in classes), len(gold))
    f1s = []
    for c in classes:
        tp = m[(c, c)]
        fp = sum(m[(g, c)] for g in classes if g != c)
        fn = sum(m[(c, p)] for p in classes + (None,) if p != c)
        f1s.append(Fraction(0) if tp == 0 else Fraction(2 * tp, 2 * tp + fp + fn))
    return acc, sum(f1s) / len(f1s)


def all_labelings(n, labels=("pos", "neg")):
    return list(product(labels, repeat=n))


def directional_check(loss_fn, flat, grad, n_dirs=100, h=1e-5, seed=0):
    """Largest relative error between ``grad . v`` and a central difference
    of ``loss_fn`` along ``n_dirs`` random unit directions ``v``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_dirs):
        v = rng.standard_normal(flat.shape)
        v /= np.linalg.norm(v)
        fd = (loss_fn(flat + h * v) - loss_fn(flat - h * v)) / (2 * h)
        an = float(grad @ v)
        denom = max(abs(fd), abs(an), 1e-8)
        worst = max(worst, abs(fd - an) / denom)
    return worst
