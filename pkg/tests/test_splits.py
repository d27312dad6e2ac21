import pytest

from moldapt.chemspace import Clustering
from moldapt.errors import TooFewClusters
from moldapt.splits import SplitPlan, butina_split_plan, random_split_plan


def _clustering(sizes):
    clusters, start = [], 0
    for s in sizes:
        clusters.append(list(range(start, start + s)))
        start += s
    return Clustering(clusters=clusters, method="butina", threshold=0.5)


def test_random_plan_partition():
    plan = random_split_plan(53, n_folds=5, n_repeats=5, seed=0)
    cells = list(plan.cells())
    assert len(cells) == 25
    for repeat in plan.folds:
        flat = sorted(i for fold in repeat for i in fold)
        assert flat == list(range(53))
    for _, _, train, test in cells:
        assert not set(train) & set(test)
        assert sorted(train + test) == list(range(53))


def test_random_plan_balanced_folds():
    plan = random_split_plan(52, 5, 1, seed=0)
    sizes = sorted(len(f) for f in plan.folds[0])
    assert max(sizes) - min(sizes) <= 1


def test_random_plan_repeats_differ_runs_match():
    a = random_split_plan(40, 5, 5, seed=3)
    b = random_split_plan(40, 5, 5, seed=3)
    assert a.folds == b.folds
    assert a.folds[0] != a.folds[1]
    c = random_split_plan(40, 5, 5, seed=4)
    assert a.folds != c.folds


def test_butina_plan_clusters_never_straddle():
    clustering = _clustering([9, 7, 6, 5, 4, 3, 3, 2, 1])
    plan = butina_split_plan(clustering, n_folds=5, n_repeats=5, seed=0)
    assert len(list(plan.cells())) == 25
    for repeat in plan.folds:
        flat = sorted(i for fold in repeat for i in fold)
        assert flat == list(range(40))
        for members in clustering.clusters:
            hits = [f for f, fold in enumerate(repeat)
                    if set(members) & set(fold)]
            assert len(hits) == 1


def test_butina_plan_too_few_clusters():
    with pytest.raises(TooFewClusters):
        butina_split_plan(_clustering([5, 5]), n_folds=5, n_repeats=1, seed=0)


def test_butina_plan_deterministic():
    clustering = _clustering([4, 4, 3, 3, 2, 2, 1, 1])
    a = butina_split_plan(clustering, 5, 3, seed=11)
    b = butina_split_plan(clustering, 5, 3, seed=11)
    assert a.folds == b.folds


def test_plan_json_roundtrip():
    plan = random_split_plan(20, 4, 2, seed=9)
    back = SplitPlan.from_json(plan.to_json())
    assert back.folds == plan.folds
    assert back.policy == plan.policy
    assert back.seed == plan.seed


def test_min_folds():
    with pytest.raises(ValueError):
        random_split_plan(10, 1, 1, seed=0)
    with pytest.raises(ValueError):
        random_split_plan(3, 5, 1, seed=0)
