"""DTW similarity and balanced average-linkage region clustering.

Clusters are always numbered by their smallest member region, which makes
every tie-break below ("lowest index first") reproducible.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba as nb
import numpy as np


class ClusteringError(ValueError):
    pass


@nb.njit(cache=True, nogil=True)
def _dtw_kernel(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.empty(m + 1)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = abs(ai - b[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


def dtw_distance(a, b) -> float:
    """Unconstrained DTW with absolute-difference cost and steps (1,0), (0,1), (1,1)."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ClusteringError("dtw_distance needs non-empty series")
    return float(_dtw_kernel(a, b))


def similarity_matrix(series: np.ndarray, threads: int | None = None) -> np.ndarray:
    """Pairwise DTW distances between the columns of a ``(T, N)`` array.

    A ``DemandTensor`` (or ``(T, N, D)`` array) may be passed; channel 0 is used.
    """
    values = getattr(series, "values", series)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values[:, :, 0]
    cols = [np.ascontiguousarray(values[:, i]) for i in range(values.shape[1])]
    n = len(cols)
    dist = np.zeros((n, n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    workers = max(1, threads or os.cpu_count() or 1)
    if workers == 1 or len(pairs) < 2:
        results = [_dtw_kernel(cols[i], cols[j]) for i, j in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda p: _dtw_kernel(cols[p[0]], cols[p[1]]), pairs))
    for (i, j), d in zip(pairs, results):
        dist[i, j] = dist[j, i] = d
    return dist


def cluster_distance(ci: Sequence[int], cj: Sequence[int], m_sim: np.ndarray) -> float:
    """Average ``m_sim`` over all cross pairs of two disjoint clusters."""
    ci, cj = list(ci), list(cj)
    if not ci or not cj:
        raise ClusteringError("clusters must be non-empty")
    if set(ci) & set(cj):
        raise ClusteringError("clusters overlap")
    return float(np.asarray(m_sim)[np.ix_(ci, cj)].sum() / (len(ci) * len(cj)))


@dataclass
class Partition:
    """``assignment[n]`` is the cluster of region ``n``; clusters are ``0..M-1``."""

    assignment: np.ndarray
    n_clusters: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        present = np.unique(self.assignment)
        if len(present) != self.n_clusters or (self.n_clusters and
                                               (present[0] != 0 or present[-1] != self.n_clusters - 1)):
            raise ClusteringError("every cluster must be non-empty and labelled 0..M-1")

    @classmethod
    def from_clusters(cls, clusters: Sequence[Sequence[int]], n_regions: int) -> "Partition":
        """Build from member lists, relabelling clusters by smallest member."""
        ordered = sorted((sorted(c) for c in clusters), key=lambda c: c[0])
        assignment = np.full(n_regions, -1, dtype=np.int64)
        for k, members in enumerate(ordered):
            assignment[members] = k
        if np.any(assignment < 0):
            raise ClusteringError("partition does not cover every region")
        return cls(assignment, len(ordered))

    def clusters(self) -> list[list[int]]:
        return [np.flatnonzero(self.assignment == k).tolist() for k in range(self.n_clusters)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clusters)

    def cluster_map(self) -> np.ndarray:
        """Binary ``(M, N)`` membership matrix."""
        cmap = np.zeros((self.n_clusters, len(self.assignment)))
        cmap[self.assignment, np.arange(len(self.assignment))] = 1.0
        return cmap


def agglomerate(m_sim: np.ndarray, target_m: int) -> Partition:
    """Average-linkage agglomeration down to ``target_m`` clusters.

    The closest pair is merged each round; ties go to the lexicographically
    smallest ``(i, j)`` of cluster indices.
    """
    m_sim = np.asarray(m_sim, dtype=np.float64)
    n = m_sim.shape[0]
    if not 1 <= target_m <= n:
        raise ClusteringError(f"target cluster count {target_m} outside [1, {n}]")
    members = [[i] for i in range(n)]
    # Cross-pair sums between clusters, kept in cluster-index order.
    sums = m_sim.copy()
    sizes = np.ones(n)
    while len(members) > target_m:
        k = len(members)
        dist = sums / np.outer(sizes, sizes)
        dist[np.tril_indices(k)] = np.inf
        # argmin over the row-major flattening is exactly the (i, j) tie-break
        i, j = divmod(int(np.argmin(dist)), k)
        members[i] = members[i] + members[j]
        del members[j]
        sums[i, :] += sums[j, :]
        sums[:, i] += sums[:, j]
        sums = np.delete(np.delete(sums, j, axis=0), j, axis=1)
        sizes[i] += sizes[j]
        sizes = np.delete(sizes, j)
        # merging i < j keeps i's smallest member, so the ordering by smallest
        # member is preserved without re-sorting
    return Partition.from_clusters(members, n)


def default_threshold(n_regions: int, n_clusters: int, factor: float = 1.5) -> int:
    return math.ceil(factor * n_regions / n_clusters)


def balance(partition: Partition, m_sim: np.ndarray, threshold: int) -> Partition:
    """Cap cluster sizes at ``threshold`` by moving outlying members.

    While a cluster is oversized, its member with the largest average distance
    to the rest of the cluster moves to the nearest cluster (average linkage)
    that still has room.
    """
    m_sim = np.asarray(m_sim, dtype=np.float64)
    threshold = int(threshold)
    if threshold < 1:
        raise ClusteringError("threshold must be at least 1")
    n, m = len(partition.assignment), partition.n_clusters
    if m * threshold < n:
        raise ClusteringError(f"infeasible balancing: {m} clusters x threshold {threshold} < {n} regions")
    assign = partition.assignment.copy()
    while True:
        sizes = np.bincount(assign, minlength=m)
        over = np.flatnonzero(sizes > threshold)
        if over.size == 0:
            break
        k = int(over[0])
        own = np.flatnonzero(assign == k)
        block = m_sim[np.ix_(own, own)]
        spread = (block.sum(axis=1) - np.diag(block)) / (len(own) - 1)
        p = int(own[np.argmax(spread)])
        best, best_d = -1, np.inf
        for c in range(m):
            if c == k or sizes[c] >= threshold:
                continue
            d = m_sim[p, assign == c].mean()
            if d < best_d:
                best, best_d = c, d
        assign[p] = best
    return Partition.from_clusters(Partition(assign, m).clusters(), n)


@dataclass
class ClusterLevel:
    partition: Partition
    threshold: int

    @property
    def n_clusters(self) -> int:
        return self.partition.n_clusters

    @property
    def cluster_map(self) -> np.ndarray:
        return self.partition.cluster_map()


@dataclass
class ClusterHierarchy:
    levels: list[ClusterLevel] = field(default_factory=list)
    threshold_factor: float = 1.5
    fingerprint: str = ""
    n_regions: int = 0

    @property
    def level_counts(self) -> list[int]:
        return [lvl.n_clusters for lvl in self.levels]

    @property
    def cluster_maps(self) -> list[np.ndarray]:
        return [lvl.cluster_map for lvl in self.levels]

    def __len__(self) -> int:
        return len(self.levels)

    def to_dict(self) -> dict:
        return {
            "level_counts": self.level_counts,
            "levels": [{"assignment": lvl.partition.assignment.tolist(), "threshold": lvl.threshold}
                       for lvl in self.levels],
            "threshold_factor": self.threshold_factor,
            "fingerprint": self.fingerprint,
            "n_regions": self.n_regions,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterHierarchy":
        levels = []
        for entry, count in zip(doc["levels"], doc["level_counts"]):
            levels.append(ClusterLevel(Partition(entry["assignment"], count), int(entry["threshold"])))
        return cls(levels, float(doc.get("threshold_factor", 1.5)), doc.get("fingerprint", ""),
                   int(doc.get("n_regions", 0)))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ClusterHierarchy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_hierarchy(m_sim: np.ndarray, level_counts: Sequence[int], threshold_factor: float = 1.5,
                    fingerprint: str = "") -> ClusterHierarchy:
    """Independent agglomerate-then-balance clustering for each requested count."""
    m_sim = np.asarray(m_sim, dtype=np.float64)
    n = m_sim.shape[0]
    counts = [int(c) for c in level_counts]
    if any(c < 1 or c >= n for c in counts):
        raise ClusteringError(f"level counts {counts} must lie in [1, {n - 1}] for {n} regions")
    if any(a <= b for a, b in zip(counts, counts[1:])):
        raise ClusteringError(f"level counts {counts} must be strictly decreasing")
    levels = []
    for c in counts:
        threshold = default_threshold(n, c, threshold_factor)
        part = balance(agglomerate(m_sim, c), m_sim, threshold)
        levels.append(ClusterLevel(part, threshold))
    return ClusterHierarchy(levels, threshold_factor, fingerprint, n)
