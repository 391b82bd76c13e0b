import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from ltlab.sampling import (ClassBalancedSampler, RandomSampler, make_rng, next_batch_cbs,
                            next_batch_rrs)

# imbalanced labels for ten classes, including several with fewer than Z samples
COUNTS_10 = np.array([40, 25, 15, 9, 6, 4, 3, 2, 1, 1])
LABELS_10 = np.repeat(np.arange(10), COUNTS_10)


def test_full_epoch_batch_is_a_permutation():
    s = RandomSampler(4, 4, seed=0)
    assert sorted(next_batch_rrs(s).tolist()) == [0, 1, 2, 3]


def test_rrs_uniform_over_samples():
    s = RandomSampler(10, 3, seed=3)
    freq = np.zeros(10)
    for _ in range(3 * 1000):
        np.add.at(freq, s.next_batch(), 1)
    assert s.epoch == 999
    assert chisquare(freq).pvalue > 0.01


def test_rrs_no_repeat_within_epoch_and_remainder_dropped():
    s = RandomSampler(11, 4, seed=1)
    for _ in range(50):
        epoch = np.concatenate([s.next_batch(), s.next_batch()])
        assert np.unique(epoch).size == 8


def test_rrs_rejects_oversized_batch():
    with pytest.raises(ValueError):
        RandomSampler(3, 4, seed=0)


def test_rrs_determinism():
    a, b = RandomSampler(100, 7, seed=9), RandomSampler(100, 7, seed=9)
    for _ in range(40):
        assert np.array_equal(a.next_batch(), b.next_batch())
    c = RandomSampler(100, 7, seed=10)
    assert not all(np.array_equal(a.next_batch(), c.next_batch()) for _ in range(5))


def test_cbs_two_classes_of_four():
    s = ClassBalancedSampler(LABELS_10, 10, 8, 4, seed=0)
    assert s.k == 2
    labels = LABELS_10[next_batch_cbs(s)]
    vals, mult = np.unique(labels, return_counts=True)
    assert vals.size == 2 and mult.tolist() == [4, 4]


def test_cbs_single_class():
    labels = np.zeros(3, dtype=int)
    s = ClassBalancedSampler(labels, 1, 6, 6, seed=2)
    for _ in range(5):
        b = s.next_batch()
        assert b.size == 6 and np.all(labels[b] == 0)


def test_cbs_ten_thousand_batches():
    s = ClassBalancedSampler(LABELS_10, 10, 8, 4, seed=11)
    appear = np.zeros(10)
    draws = np.zeros(10)
    for _ in range(10_000):
        labels = LABELS_10[s.next_batch()]
        vals, mult = np.unique(labels, return_counts=True)
        assert vals.size == s.k and np.all(mult == 4)
        appear[vals] += 1
        np.add.at(draws, labels, 1)
    assert np.allclose(appear / 10_000, 0.2, atol=0.02)
    assert chisquare(appear).pvalue > 0.01
    assert chisquare(draws).pvalue > 0.01


def test_cbs_class_cycle_no_repeat():
    # C=7, k=3 does not divide the cycle, exercising the boundary carry
    labels = np.repeat(np.arange(7), 5)
    s = ClassBalancedSampler(labels, 7, 6, 2, seed=4)
    stream = []
    for _ in range(700):
        classes = labels[s.next_batch()][::2]
        assert np.unique(classes).size == 3
        stream.extend(classes.tolist())
    for start in range(0, len(stream) - 6, 7):
        assert sorted(stream[start:start + 7]) == list(range(7))


def test_cbs_per_class_cycle_no_repeat():
    s = ClassBalancedSampler(LABELS_10, 10, 8, 4, seed=5)
    seen = {c: [] for c in range(10)}
    for _ in range(3000):
        b = s.next_batch()
        for c in np.unique(LABELS_10[b]):
            seen[int(c)].extend(b[LABELS_10[b] == c].tolist())
    for c, used in seen.items():
        n = COUNTS_10[c]
        full = len(used) - len(used) % n
        for start in range(0, full, n):
            assert len(set(used[start:start + n])) == n


def test_cbs_construction_errors():
    with pytest.raises(ValueError):
        ClassBalancedSampler(LABELS_10, 10, 8, 3, seed=0)
    with pytest.raises(ValueError):
        ClassBalancedSampler(LABELS_10, 10, 44, 4, seed=0)


def test_mode_checks():
    with pytest.raises(ValueError):
        next_batch_cbs(RandomSampler(10, 2, seed=0))
    with pytest.raises(ValueError):
        next_batch_rrs(ClassBalancedSampler(LABELS_10, 10, 8, 4, seed=0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(2, 12))
def test_cbs_is_pure_function_of_seed(seed, z, c):
    labels = np.repeat(np.arange(c), np.arange(1, c + 1))
    k = max(1, c // 2)
    a = ClassBalancedSampler(labels, c, k * z, z, seed=seed)
    b = ClassBalancedSampler(labels, c, k * z, z, seed=seed)
    for _ in range(20):
        ba, bb = a.next_batch(), b.next_batch()
        assert np.array_equal(ba, bb)
        _, mult = np.unique(labels[ba], return_counts=True)
        assert mult.size == k and np.all(mult == z)


def test_streams_are_independent():
    assert make_rng(1, 1).integers(1 << 30) != make_rng(1, 2).integers(1 << 30)
