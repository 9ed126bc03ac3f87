"""Independent reference implementations used only by the tests.

Everything here is deliberately naive: explicit loops, plain numpy, no
DiffArray.
"""
import math

import numpy as np


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_rows(x):
    out = np.empty_like(x, dtype=np.float64)
    for idx in np.ndindex(*x.shape[:-1]):
        row = x[idx]
        e = np.array([math.exp(v - max(row)) for v in row])
        out[idx] = e / e.sum()
    return out


def brute_force_dtw(a, b):
    """Minimum over every monotone warping path, enumerated recursively."""
    n, m = len(a), len(b)
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += abs(a[i] - b[j])
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best


def naive_linkage(m_sim, target):
    """Cubic average-linkage agglomeration recomputing every cluster distance."""
    n = len(m_sim)
    clusters = [[i] for i in range(n)]
    while len(clusters) > target:
        clusters.sort(key=min)
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                total = 0.0
                for p in clusters[i]:
                    for q in clusters[j]:
                        total += m_sim[p][q]
                d = total / (len(clusters[i]) * len(clusters[j]))
                if best is None or d < best[0]:
                    best = (d, i, j)
        _, i, j = best
        clusters[i] = clusters[i] + clusters[j]
        del clusters[j]
    return sorted(sorted(c) for c in clusters)


def dense_sda(x, wq, wk, wv, lam):
    """Region differential attention evaluated per (b, t) slice."""
    B, T, N, d = x.shape
    h = wq.shape[1] // 2
    out = np.zeros((B, T, N, wv.shape[1]))
    for b in range(B):
        for t in range(T):
            X = x[b, t]
            Q, K, V = X @ wq, X @ wk, X @ wv
            s1 = softmax_rows(Q[:, :h] @ K[:, :h].T / math.sqrt(h))
            s2 = softmax_rows(Q[:, h:] @ K[:, h:].T / math.sqrt(h))
            out[b, t] = (s1 - lam * s2) @ V
    return out


def dense_standard_attention(x, wq, wk, wv):
    """Plain single-head attention over regions using the first half of Q/K."""
    B, T, N, d = x.shape
    h = wq.shape[1] // 2
    out = np.zeros((B, T, N, wv.shape[1]))
    for b in range(B):
        for t in range(T):
            X = x[b, t]
            Q, K, V = X @ wq[:, :h], X @ wk[:, :h], X @ wv
            out[b, t] = softmax_rows(Q @ K.T / math.sqrt(h)) @ V
    return out


def dense_sca(xa, wq, wk, wv, sep):
    B, T, M, d = xa.shape
    out = np.zeros((B, T, sep.shape[1], wv.shape[1]))
    for b in range(B):
        for t in range(T):
            X = xa[b, t]
            Q, K, V = X @ wq, X @ wk, X @ wv
            scores = Q @ K.T / math.sqrt(wq.shape[1])
            out[b, t] = softmax_rows(sep.T @ scores) @ V
    return out


def dense_tsa(x, wq, wk, wv):
    B, T, N, d = x.shape
    out = np.zeros((B, T, N, wv.shape[1]))
    for b in range(B):
        for n in range(N):
            X = x[b, :, n]
            Q, K, V = X @ wq, X @ wk, X @ wv
            out[b, :, n] = softmax_rows(Q @ K.T / math.sqrt(wq.shape[1])) @ V
    return out


def dense_taa(x, tf, slots, wk, wv, wsep):
    """``tf`` is (B, T, 8) calendar features shared across regions."""
    B, T, N, d = x.shape
    out = np.zeros((B, T, N, wv.shape[1]))
    for b in range(B):
        for n in range(N):
            X = x[b, :, n]
            K, V = X @ wk, X @ wv
            scores = slots[n] @ K.T / math.sqrt(wk.shape[1])      # (P, T)
            restore = tf[b] @ wsep                                # (T, P)
            out[b, :, n] = softmax_rows(restore @ scores) @ V
    return out


def warping_paths(n, m):
    """Every monotone warping path from (0, 0) to (n-1, m-1) as a list of cells."""
    if (n, m) == (1, 1):
        return [[(0, 0)]]
    out = []
    for di, dj in ((1, 0), (0, 1), (1, 1)):
        pi, pj = n - di, m - dj
        if pi >= 1 and pj >= 1:
            out.extend(path + [(n - 1, m - 1)] for path in warping_paths(pi, pj))
    return out


def path_incidence(n, m):
    """``(n_paths, n*m)`` count matrix; a path's cost is its row dotted with the flat cost matrix."""
    paths = warping_paths(n, m)
    inc = np.zeros((len(paths), n * m))
    for r, path in enumerate(paths):
        for i, j in path:
            inc[r, i * m + j] += 1
    return inc
