"""Brute-force reference computations used only by the tests.

None of these share code with the package paths they check.
"""

import itertools
import math
from collections import Counter

import numpy as np


def set_partitions(n, max_blocks):
    """Restricted-growth strings: every partition of range(n) into <= max_blocks blocks."""
    def rec(prefix, used):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for b in range(min(used + 1, max_blocks)):
            yield from rec(prefix + [b], max(used, b + 1))
    yield from rec([], 0)


def optimal_inertia(x, k):
    """Global K-means optimum by exhaustive enumeration of set partitions."""
    x = np.asarray(x, dtype=np.float64)
    best = math.inf
    for labels in set_partitions(len(x), k):
        labels = np.array(labels)
        cost = 0.0
        for b in np.unique(labels):
            pts = x[labels == b]
            cost += float(((pts - pts.mean(axis=0)) ** 2).sum())
        best = min(best, cost)
    return best


def plugin_mi(labels_a, labels_b):
    n = len(labels_a)
    joint = Counter(zip(labels_a, labels_b))
    ca, cb = Counter(labels_a), Counter(labels_b)
    return sum(c / n * math.log(c * n / (ca[a] * cb[b])) for (a, b), c in joint.items())


def arrangements(col_sums):
    """All distinct orderings of the multiset of column labels, as an (M, n) array."""
    b = [j for j, c in enumerate(col_sums) for _ in range(c)]
    return np.array(sorted(set(itertools.permutations(b))), dtype=np.int64)


def permutation_emi(row_sums, col_sums, arr=None):
    """E[MI] over every arrangement of the column labels against fixed row labels.

    Distinct arrangements of a multiset are equally likely under a uniform
    random permutation, so averaging over them is exact. Each arrangement's
    table is counted directly and its plug-in MI evaluated.
    """
    a = np.array([i for i, c in enumerate(row_sums) for _ in range(c)])
    arr = arrangements(col_sums) if arr is None else arr
    n = a.size
    r, c = len(row_sums), len(col_sums)
    onehot_a = np.eye(r)[a]                      # n x R
    onehot_b = np.eye(c)[arr]                    # M x n x C
    tables = np.einsum("nr,mnc->mrc", onehot_a, onehot_b)
    ra = np.asarray(row_sums, dtype=float)[None, :, None]
    cb = np.asarray(col_sums, dtype=float)[None, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(tables > 0, tables / n * np.log(tables * n / (ra * cb)), 0.0)
    return float(terms.sum(axis=(1, 2)).mean())


def integer_partitions(n, max_part=None):
    max_part = max_part or n
    if n == 0:
        yield ()
        return
    for p in range(min(n, max_part), 0, -1):
        for rest in integer_partitions(n - p, p):
            yield (p,) + rest


def central_difference(f, params, h=1e-6):
    grad = np.zeros_like(params)
    it = np.nditer(params, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = params[i]
        params[i] = old + h
        fp = f(params)
        params[i] = old - h
        fm = f(params)
        params[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def brute_softmax_ce(w, b, x, t):
    """Mean cross-entropy with explicit per-sample loops."""
    total = 0.0
    for xi, ti in zip(x, t):
        z = [float(np.dot(w[c], xi) + b[c]) for c in range(len(b))]
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[ti]
    return total / len(t)


def extended_objective(w, b, x, t, weight_decay=0.0):
    """Mean softmax cross-entropy + wd/2 ||w||^2 evaluated in extended precision.

    Finite differences of a float64 objective carry ~eps * f / h of round-off,
    which swamps gradient entries near 1e-7; long double pushes that floor
    down by three orders of magnitude.
    """
    ld = np.longdouble
    w, b, x = np.asarray(w, dtype=ld), np.asarray(b, dtype=ld), np.asarray(x, dtype=ld)
    z = x @ w.T + b
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    ce = (lse - z[np.arange(len(t)), t]).mean()
    return ce + ld(weight_decay) / 2 * (w * w).sum()


def extended_central_difference(f, params, h=1e-6):
    """Central differences with parameters and objective in long double."""
    params = np.asarray(params, dtype=np.longdouble).copy()
    grad = np.zeros(params.shape, dtype=np.longdouble)
    h = np.longdouble(h)
    for i in np.ndindex(params.shape):
        old = params[i]
        params[i] = old + h
        fp = f(params)
        params[i] = old - h
        fm = f(params)
        params[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad.astype(np.float64)
