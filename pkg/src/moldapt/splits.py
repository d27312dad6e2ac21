"""Repeated cross-validation split plans (random and cluster-based).

A SplitPlan is a deterministic assignment of dataset rows to
(repeat, fold) cells; it serializes to JSON so downstream runs can be
replayed exactly.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

from .chemspace import Clustering
from .errors import TooFewClusters


@dataclass
class SplitPlan:
    policy: str                  # "random" | "butina"
    n_repeats: int
    n_folds: int
    seed: int
    folds: list[list[list[int]]]  # [repeat][fold] -> row indices
    dataset_hash: str = ""

    def cells(self):
        """Yield (repeat, fold, train_indices, test_indices)."""
        for r, repeat in enumerate(self.folds):
            for f, test in enumerate(repeat):
                train = sorted(
                    i for g, fold in enumerate(repeat) if g != f for i in fold
                )
                yield r, f, train, sorted(test)

    def to_json(self) -> str:
        return json.dumps({
            "policy": self.policy,
            "n_repeats": self.n_repeats,
            "n_folds": self.n_folds,
            "seed": self.seed,
            "dataset_hash": self.dataset_hash,
            "folds": self.folds,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(policy=d["policy"], n_repeats=d["n_repeats"],
                   n_folds=d["n_folds"], seed=d["seed"], folds=d["folds"],
                   dataset_hash=d.get("dataset_hash", ""))


def _repeat_seed(seed: int, repeat: int) -> int:
    return (seed * 1000003 + repeat) & 0x7FFFFFFF


def random_split_plan(n: int, n_folds: int, n_repeats: int,
                      seed: int) -> SplitPlan:
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if n < n_folds:
        raise ValueError(f"cannot split {n} rows into {n_folds} folds")
    all_folds = []
    for r in range(n_repeats):
        rng = random.Random(_repeat_seed(seed, r))
        order = list(range(n))
        rng.shuffle(order)
        folds = [sorted(order[f::n_folds]) for f in range(n_folds)]
        all_folds.append(folds)
    return SplitPlan(policy="random", n_repeats=n_repeats, n_folds=n_folds,
                     seed=seed, folds=all_folds)


def butina_split_plan(clustering: Clustering, n_folds: int, n_repeats: int,
                      seed: int) -> SplitPlan:
    """Assign whole clusters to folds greedily, largest first, each to the
    currently smallest fold. Equal-size clusters are shuffled per repeat so
    repeats differ; no cluster ever straddles folds."""
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    clusters = clustering.clusters
    if len(clusters) < n_folds:
        raise TooFewClusters(
            f"{len(clusters)} clusters cannot fill {n_folds} folds"
        )
    all_folds = []
    for r in range(n_repeats):
        rng = random.Random(_repeat_seed(seed, r))
        # group by size, shuffle within each size class, then largest first
        by_size: dict[int, list[list[int]]] = {}
        for c in clusters:
            by_size.setdefault(len(c), []).append(c)
        ordered: list[list[int]] = []
        for size in sorted(by_size, reverse=True):
            group = list(by_size[size])
            rng.shuffle(group)
            ordered.extend(group)
        folds: list[list[int]] = [[] for _ in range(n_folds)]
        for c in ordered:
            target = min(range(n_folds), key=lambda f: (len(folds[f]), f))
            folds[target].extend(c)
        all_folds.append([sorted(f) for f in folds])
    return SplitPlan(policy="butina", n_repeats=n_repeats, n_folds=n_folds,
                     seed=seed, folds=all_folds)
