"""Fingerprint-space clustering and proportional subset selection.

Two clusterers are provided: classic Butina (sphere exclusion, used for
cluster-based CV splitting) and a single-pass leader algorithm labeled
``bitbirch_like`` — a linear-time stand-in for corpus-scale diversity
preserving subsampling.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .features import Fingerprint, tanimoto


@dataclass
class Clustering:
    clusters: list[list[int]]   # descending size; first member leads
    method: str                 # "butina" | "bitbirch_like"
    threshold: float

    def labels(self) -> list[int]:
        n = sum(len(c) for c in self.clusters)
        out = [-1] * n
        for ci, members in enumerate(self.clusters):
            for i in members:
                out[i] = ci
        return out


@dataclass
class SubsetSelection:
    fraction: float
    indices: list[int]
    per_cluster_quota: dict[int, int]
    seed: int


def _sort_clusters(clusters: list[list[int]]) -> list[list[int]]:
    return sorted(clusters, key=lambda c: (-len(c), c[0]))


def butina_cluster(fps: list[Fingerprint], threshold: float) -> Clustering:
    """Sphere-exclusion clustering at a Tanimoto similarity cutoff.

    Neighbor lists are computed once; the unassigned point with the most
    unassigned neighbors becomes the next centroid (ties: lowest index) and
    claims its unassigned neighbors.
    """
    n = len(fps)
    if n == 0:
        raise ValueError("need at least one fingerprint")
    neighbors: list[set[int]] = [set() for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if tanimoto(fps[i], fps[j]) >= threshold:
                neighbors[i].add(j)
                neighbors[j].add(i)

    unassigned = set(range(n))
    clusters: list[list[int]] = []
    while unassigned:
        best = max(unassigned,
                   key=lambda i: (len(neighbors[i] & unassigned), -i))
        members = sorted(neighbors[best] & unassigned - {best})
        clusters.append([best] + members)
        unassigned -= set(clusters[-1])
    return Clustering(clusters=_sort_clusters(clusters), method="butina",
                      threshold=threshold)


def leader_cluster(fps: list[Fingerprint], threshold: float) -> Clustering:
    """Single-pass leader clustering: each point joins the first leader with
    similarity >= threshold, else starts a new cluster. Output depends on
    input order but is deterministic for a fixed order."""
    if not fps:
        raise ValueError("need at least one fingerprint")
    leaders: list[int] = []
    clusters: list[list[int]] = []
    for i, fp in enumerate(fps):
        for ci, leader in enumerate(leaders):
            if tanimoto(fps[leader], fp) >= threshold:
                clusters[ci].append(i)
                break
        else:
            leaders.append(i)
            clusters.append([i])
    return Clustering(clusters=_sort_clusters(clusters), method="bitbirch_like",
                      threshold=threshold)


def proportional_subset(clustering: Clustering, fraction: float,
                        seed: int) -> SubsetSelection:
    """Sample round(fraction * |cluster|) members from each cluster without
    replacement (round half up), preserving the cluster size distribution."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    rng = random.Random(seed)
    indices: list[int] = []
    quotas: dict[int, int] = {}
    for ci, members in enumerate(clustering.clusters):
        quota = int(fraction * len(members) + 0.5)
        quotas[ci] = quota
        indices.extend(sorted(rng.sample(members, quota)))
    return SubsetSelection(fraction=fraction, indices=indices,
                           per_cluster_quota=quotas, seed=seed)
