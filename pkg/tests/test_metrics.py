import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphmia.diffcore import ContractError
from graphmia.metrics import accuracy, auc, recall, report

from _oracles import pair_auc


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([1, 0, 1], [0, 1, 0]) == 0.0
    assert accuracy([1, 0, 0, 0], [1, 1, 0, 0]) == 0.75
    with pytest.raises(ContractError):
        accuracy([], [])
    with pytest.raises(ContractError):
        accuracy([1], [1, 0])


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc([0.4] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    assert auc([0.9, 0.2, 0.5], [1, 1, 0]) == 0.5
    with pytest.raises(ContractError):
        auc([0.1, 0.2], [1, 1])


def test_recall_examples():
    assert recall([1, 1, 0], [1, 1, 0]) == 1.0
    assert recall([0, 0, 0], [1, 1, 0]) == 0.0
    assert recall([1, 0, 1, 0], [1, 1, 1, 0]) == pytest.approx(2 / 3)
    assert recall([1, 0], [0, 0]) == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_rank_auc_equals_pair_counting(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    truth = rng.integers(0, 2, n)
    truth[:2] = [0, 1]
    scores = rng.integers(0, 10, n) / 10.0  # coarse grid forces ties
    assert auc(scores, truth) == pair_auc(scores.tolist(), truth.tolist())


@pytest.mark.parametrize("seed", range(10))
def test_auc_invariant_under_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(80)
    truth = rng.integers(0, 2, 80)
    base = auc(scores, truth)
    for fn in (np.exp, lambda s: 3 * s - 1, lambda s: s ** 3, np.arctan):
        assert auc(fn(scores), truth) == base


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40), st.randoms())
def test_accuracy_recall_permutation_invariant(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    p, t = zip(*pairs)
    ps, ts = zip(*shuffled)
    assert accuracy(p, t) == accuracy(ps, ts)
    assert recall(p, t) == recall(ps, ts)


def test_report_counts_and_threshold():
    rep = report([0.9, 0.5, 0.2, 0.7], [1, 1, 0, 0], seed=3)
    assert (rep.tp, rep.fn, rep.tn, rep.fp) == (1, 1, 1, 1)
    assert rep.accuracy == (rep.tp + rep.tn) / rep.total
    assert rep.recall == 0.5 and rep.seed == 3
