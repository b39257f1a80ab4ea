"""Clustering metric tests.

Each metric gets an independent oracle: ACC against exhaustive permutation
search, ARI against direct pair counting (2(ad-bc) / ((a+b)(b+d)+(a+c)(c+d))),
NMI against a Counter-based entropy computation. Hand-worked values cover the
small cases, hypothesis covers the relabeling invariances.
"""

import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mice.errors import EmptyInputError, LengthMismatchError
from mice.metrics import acc, ari, contingency_table, nmi
from mice.numcore import make_rng

label_pairs = st.lists(
    st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40
)


def acc_brute(truth, pred):
    """Best one-to-one cluster matching by trying every permutation."""
    t_vals = sorted(set(truth))
    p_vals = sorted(set(pred))
    size = max(len(t_vals), len(p_vals))
    p_index = {v: i for i, v in enumerate(p_vals)}
    best = 0
    for perm in itertools.permutations(range(size)):
        matches = 0
        for tv, pv in zip(truth, pred):
            mapped = perm[p_index[pv]]
            if mapped < len(t_vals) and t_vals[mapped] == tv:
                matches += 1
        best = max(best, matches)
    return best / len(truth)


def ari_brute(truth, pred):
    """Pair-count ARI: a/b/c/d tallied over all unordered point pairs."""
    a = b = c = d = 0
    n = len(truth)
    for i in range(n):
        for j in range(i + 1, n):
            same_t = truth[i] == truth[j]
            same_p = pred[i] == pred[j]
            if same_t and same_p:
                a += 1
            elif same_t:
                b += 1
            elif same_p:
                c += 1
            else:
                d += 1
    denom = (a + b) * (b + d) + (a + c) * (c + d)
    if denom == 0:
        return 1.0
    return 2.0 * (a * d - b * c) / denom


def nmi_brute(truth, pred):
    n = len(truth)

    def entropy(labels):
        return -sum(
            (cnt / n) * math.log(cnt / n) for cnt in Counter(labels).values()
        )

    h_t, h_p = entropy(truth), entropy(pred)
    if h_t == 0.0 and h_p == 0.0:
        return 1.0
    joint = Counter(zip(truth, pred))
    ct, cp = Counter(truth), Counter(pred)
    info = sum(
        (cnt / n) * math.log(cnt * n / (ct[tv] * cp[pv]))
        for (tv, pv), cnt in joint.items()
    )
    return info / ((h_t + h_p) / 2.0)


def random_labelings(seed, trials, n=40, k=5):
    rng = make_rng(seed)
    for _ in range(trials):
        yield (
            list(rng.integers(0, k, size=n)),
            list(rng.integers(0, k, size=n)),
        )


class TestContingency:
    def test_hand_table(self):
        table = contingency_table([1, 1, 1, 2, 2, 2], [1, 1, 2, 2, 3, 3])
        np.testing.assert_array_equal(table, [[2, 1, 0], [0, 1, 2]])

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            contingency_table([], [])
        with pytest.raises(LengthMismatchError):
            contingency_table([1, 2], [1])


class TestNmi:
    def test_hand_case(self):
        """3+3 truth split vs 2+2+2 predicted split: MI = (2/3) ln 2, mean entropy
        (ln 2 + ln 3)/2, so NMI = 4 ln 2 / (3 ln 6)."""
        value = nmi([1, 1, 1, 2, 2, 2], [1, 1, 2, 2, 3, 3])
        np.testing.assert_allclose(value, 4 * math.log(2) / (3 * math.log(6)), rtol=1e-14)

    def test_perfect_and_trivial(self):
        assert nmi([1, 2, 3], [7, 8, 9]) == 1.0
        assert nmi([1, 1, 1], [1, 1, 1]) == 1.0
        assert nmi([1, 1, 1, 1], [1, 1, 2, 2]) == 0.0
        assert nmi([1, 1, 2, 2], [3, 3, 3, 3]) == 0.0

    def test_matches_counter_oracle(self):
        for truth, pred in random_labelings(seed=60, trials=50):
            np.testing.assert_allclose(nmi(truth, pred), nmi_brute(truth, pred), rtol=1e-12)

    def test_bounded(self):
        for truth, pred in random_labelings(seed=61, trials=50, n=25, k=4):
            assert -1e-12 <= nmi(truth, pred) <= 1.0 + 1e-12


class TestAcc:
    def test_perfect_under_relabeling(self):
        assert acc([1, 1, 2, 2], [5, 5, 3, 3]) == 1.0

    def test_extra_predicted_clusters(self):
        assert acc([1, 1, 1, 1], [1, 2, 3, 4]) == 0.25
        assert acc([1, 2, 3, 4], [1, 1, 1, 1]) == 0.25

    def test_hand_majority(self):
        # best matching pairs truth 1 with pred 1 (2 hits) and truth 2 with pred 2 (1 hit)
        assert acc([1, 1, 1, 2], [1, 1, 2, 2]) == 0.75

    def test_matches_permutation_search(self):
        for truth, pred in random_labelings(seed=62, trials=50):
            np.testing.assert_allclose(acc(truth, pred), acc_brute(truth, pred), rtol=1e-14)

    def test_six_cluster_search(self):
        for truth, pred in random_labelings(seed=63, trials=10, n=60, k=6):
            np.testing.assert_allclose(acc(truth, pred), acc_brute(truth, pred), rtol=1e-14)


class TestAri:
    def test_hand_case_is_minus_half(self):
        """Crossed 2x2 case: a=0, b=c=2, d=2 gives 2(0*2 - 4)/((2)(4)+(2)(4)) = -1/2."""
        np.testing.assert_allclose(ari([1, 1, 2, 2], [1, 2, 1, 2]), -0.5, rtol=1e-15)

    def test_perfect_and_degenerate(self):
        assert ari([1, 1, 2, 2], [4, 4, 9, 9]) == 1.0
        assert ari([1, 1, 1], [2, 2, 2]) == 1.0
        assert ari([1], [1]) == 1.0

    def test_matches_pair_counting(self):
        for truth, pred in random_labelings(seed=64, trials=50):
            np.testing.assert_allclose(ari(truth, pred), ari_brute(truth, pred), rtol=1e-12)


class TestInvariances:
    @settings(max_examples=150, deadline=None)
    @given(label_pairs, st.permutations(list(range(5))), st.permutations(list(range(5))))
    def test_relabeling_invariance(self, pairs, t_perm, p_perm):
        truth = [t for t, _ in pairs]
        pred = [p for _, p in pairs]
        truth2 = [t_perm[t] for t in truth]
        pred2 = [p_perm[p] for p in pred]
        for metric in (nmi, acc, ari):
            np.testing.assert_allclose(
                metric(truth, pred), metric(truth2, pred2), rtol=1e-12, atol=1e-12
            )

    @settings(max_examples=100, deadline=None)
    @given(label_pairs, st.randoms(use_true_random=False))
    def test_point_order_invariance(self, pairs, rnd):
        truth = [t for t, _ in pairs]
        pred = [p for _, p in pairs]
        order = list(range(len(pairs)))
        rnd.shuffle(order)
        truth2 = [truth[i] for i in order]
        pred2 = [pred[i] for i in order]
        for metric in (nmi, acc, ari):
            np.testing.assert_allclose(
                metric(truth, pred), metric(truth2, pred2), rtol=1e-12, atol=1e-12
            )

    def test_symmetry_of_nmi_and_ari(self):
        for truth, pred in random_labelings(seed=65, trials=20):
            np.testing.assert_allclose(nmi(truth, pred), nmi(pred, truth), rtol=1e-12)
            np.testing.assert_allclose(ari(truth, pred), ari(pred, truth), rtol=1e-12)
