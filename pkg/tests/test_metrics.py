import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddc.metrics import acc, best_map, contingency, hungarian, nmi


def brute_force_assignment(cost):
    n = len(cost)
    return min(sum(cost[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def brute_force_acc(labels, clusters):
    classes, clus = np.unique(labels), np.unique(clusters)
    size = max(len(classes), len(clus))
    best = 0
    for perm in itertools.permutations(range(size), len(clus)):
        mapping = {c: perm[i] for i, c in enumerate(clus)}
        hits = sum(
            1 for l, c in zip(labels, clusters)
            if mapping[c] < len(classes) and classes[mapping[c]] == l
        )
        best = max(best, hits)
    return best / len(labels)


def test_hungarian_examples():
    m = hungarian([[1, 2], [2, 1]])
    assert m.as_dict() == {0: 0, 1: 1} and m.cost == 2
    c = np.ones((4, 4)) - np.eye(4)
    m = hungarian(c)
    assert list(m.mapping) == [0, 1, 2, 3] and m.cost == 0


def test_hungarian_errors_and_empty():
    with pytest.raises(ValueError, match="square"):
        hungarian(np.ones((2, 3)))
    with pytest.raises(ValueError, match="finite"):
        hungarian([[0, np.inf], [1, 0]])
    assert hungarian(np.zeros((0, 0))).cost == 0


def test_hungarian_lexicographic_tie_break():
    # every permutation costs the same: smallest one is the identity
    assert list(hungarian(np.zeros((4, 4))).mapping) == [0, 1, 2, 3]
    # two optima: (1, 0, 2) and (2, 0, 1)... pick lexicographically smaller
    c = np.array([[5, 0, 0], [0, 5, 5], [5, 0, 0]])
    assert list(hungarian(c).mapping) == [1, 0, 2]


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_hungarian_matches_brute_force(n, seed):
    cost = np.random.default_rng(seed).integers(-10, 10, size=(n, n))
    m = hungarian(cost)
    assert m.cost == brute_force_assignment(cost.tolist())
    assert sorted(m.mapping) == list(range(n))
    best_lex = min(
        p for p in itertools.permutations(range(n)) if sum(cost[i, p[i]] for i in range(n)) == m.cost
    )
    assert tuple(m.mapping) == best_lex


def test_nmi_examples():
    assert nmi([0, 0, 1, 1], [0, 0, 1, 1]) == pytest.approx(1.0)
    assert nmi([0, 0, 1, 1, 2], [2, 2, 0, 0, 1]) == pytest.approx(1.0)
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-15)
    assert nmi([3, 3, 3], [1, 1, 1]) == 1.0
    assert nmi([0, 0, 0, 0], [0, 1, 0, 1]) == 0.0
    with pytest.raises(ValueError):
        nmi([0, 1], [0, 1, 1])


def test_nmi_against_hand_value():
    # l = [0,0,1,1], c = [0,0,0,1]: I = 0.5 ln2 - 0.75 ln(1.5) + ... computed from the table
    l, c = np.array([0, 0, 1, 1]), np.array([0, 0, 0, 1])
    p = np.array([[0.5, 0.0], [0.25, 0.25]])
    pl, pc = p.sum(1), p.sum(0)
    mi = sum(p[i, j] * np.log(p[i, j] / (pl[i] * pc[j])) for i in range(2) for j in range(2) if p[i, j] > 0)
    hl = -(pl * np.log(pl)).sum()
    hc = -(pc * np.log(pc)).sum()
    assert nmi(l, c) == pytest.approx(mi / ((hl + hc) / 2), rel=1e-12)


def test_acc_examples():
    assert acc([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert acc([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert acc([0, 0, 1, 1], [0, 1, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        acc([0], [0, 1])


def test_acc_more_clusters_than_classes():
    labels = [0, 0, 0, 1, 1, 1]
    clusters = [0, 0, 1, 2, 2, 3]
    assert acc(labels, clusters) == pytest.approx(4 / 6)
    assert best_map(labels, clusters) in ({0: 0, 2: 1}, {0: 0, 3: 1}, {1: 0, 2: 1})


def test_contingency_counts():
    t = contingency([0, 1, 1, 2], [1, 1, 0, 0])
    assert t.sum() == 4
    np.testing.assert_array_equal(t, [[0, 1], [1, 1], [1, 0]])


partitions = st.integers(1, 5).flatmap(
    lambda k: st.tuples(
        st.lists(st.integers(0, k - 1), min_size=1, max_size=40),
        st.integers(0, 2**31),
    )
)


@given(partitions)
def test_metrics_identity_and_relabeling_invariance(case):
    labels, seed = case
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    clusters = rng.integers(0, 5, size=len(labels))
    assert nmi(labels, labels) == pytest.approx(1.0)
    assert acc(labels, labels) == 1.0
    perm_l = rng.permutation(10)
    perm_c = rng.permutation(10)
    assert nmi(perm_l[labels], perm_c[clusters]) == pytest.approx(nmi(labels, clusters), abs=1e-12)
    assert acc(perm_l[labels], perm_c[clusters]) == acc(labels, clusters)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_acc_matches_brute_force(k_true, k_clu, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k_true, size=30)
    clusters = rng.integers(0, k_clu, size=30)
    assert acc(labels, clusters) == pytest.approx(brute_force_acc(labels, clusters))


@given(st.integers(2, 6), st.integers(0, 2**31))
def test_acc_bounds_balanced(k, seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), 5)
    clusters = rng.integers(0, k, size=len(labels))
    a = acc(labels, clusters)
    assert 1 / k <= a <= 1
    assert 0 <= nmi(labels, clusters) <= 1
