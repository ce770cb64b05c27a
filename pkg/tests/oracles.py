"""Independent oracles the tests check production code against.

Everything here is deliberately naive: direct summation, exhaustive
enumeration, textbook recursions, classical Jacobi sweeps.  None of it
shares a code path with the package.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np


def fd_gradients(f, arrs, h=1e-5):
    """Central finite differences of scalar f() w.r.t. arrays mutated in place."""
    grads = []
    for a in arrs:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(1.0, float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom


def conv1d_loops(x, kernel, bias):
    """Direct triple-loop same-centred convolution."""
    l, cin = x.shape
    k, kcin, cout = kernel.shape
    assert kcin == cin
    h = (k - 1) // 2
    out = np.zeros((l, cout))
    for i in range(l):
        for o in range(cout):
            s = bias[o]
            for j in range(k):
                for c in range(cin):
                    src = i + j - h
                    if 0 <= src < l:
                        s += x[src, c] * kernel[j, c, o]
            out[i, o] = s
    return out


def jacobi_eigh(a, sweeps=100, tol=1e-14):
    """Classical cyclic Jacobi eigendecomposition of a symmetric matrix."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = 0.5 * np.arctan2(2 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(theta), np.sin(theta)
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    evals = np.diag(a).copy()
    order = np.argsort(evals)[::-1]
    return evals[order], v[:, order]


def lloyd_once(points, centroids, iters=200):
    """Plain Lloyd iterations from given seeds until assignment stabilises."""
    centroids = centroids.copy()
    assign = None
    for _ in range(iters):
        d2 = np.square(points[:, None, :] - centroids[None, :, :]).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(centroids.shape[0]):
            mask = assign == j
            if mask.any():
                centroids[j] = points[mask].mean(axis=0)
    d2 = np.square(points[:, None, :] - centroids[None, :, :]).sum(axis=2)
    assign = d2.argmin(axis=1)
    wcss = float(np.sum(np.square(points - centroids[assign])))
    return wcss


def brute_lloyd_best(points, k):
    """Best WCSS over Lloyd runs seeded from every k-subset of the points."""
    best = np.inf
    for idx in itertools.combinations(range(points.shape[0]), k):
        best = min(best, lloyd_once(points, points[list(idx)]))
    return best


def edit_recursive(a, b):
    """Textbook memoised recursion for Levenshtein distance."""

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(
            d(i + 1, j) + 1,
            d(i, j + 1) + 1,
            d(i + 1, j + 1) + (a[i] != b[j]),
        )

    return d(0, 0)


def edit_table_ternary(max_len):
    """Exhaustive suffix-recursion tables over a 3-symbol alphabet.

    tables[(la, lb)][ia, ib] is the distance between the la-symbol sequence
    with ternary code ia (most significant trit first) and the lb-symbol
    sequence with code ib, for all lengths up to max_len.  Built bottom-up
    straight from the recursive definition.
    """
    tables = {}
    pow3 = [3**i for i in range(max_len + 1)]
    for la in range(max_len + 1):
        for lb in range(max_len + 1):
            na, nb = pow3[la], pow3[lb]
            t = np.zeros((na, nb), dtype=np.int8)
            if la == 0:
                t[:, :] = lb
            elif lb == 0:
                t[:, :] = la
            else:
                ia = np.arange(na)[:, None]
                ib = np.arange(nb)[None, :]
                heada = ia // pow3[la - 1]
                resta = ia % pow3[la - 1]
                headb = ib // pow3[lb - 1]
                restb = ib % pow3[lb - 1]
                sub = tables[(la - 1, lb - 1)][resta, restb] + (heada != headb)
                dele = tables[(la - 1, lb)][resta, ib] + 1
                ins = tables[(la, lb - 1)][ia, restb] + 1
                t = np.minimum(np.minimum(dele, ins), sub).astype(np.int8)
            tables[(la, lb)] = t
    return tables


def ternary_decode(code, length):
    out = []
    for _ in range(length):
        out.append(code % 3)
        code //= 3
    return tuple(reversed(out))
