"""Numeric primitive tests.

Expected values are either hand computations (3-4-5 triangle, log 2 softmax)
or closed-form bounds that hold exactly (logsumexp envelope). Idempotence and
normalization properties are additionally searched with hypothesis.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mice.errors import (
    EmptyInputError,
    InvalidInputError,
    LengthMismatchError,
    NonPositiveTemperatureError,
    ZeroNormError,
)
from mice.numcore import (
    dot,
    l2_normalize,
    log_sum_exp,
    logsumexp_rows,
    make_rng,
    normalize_rows,
    row_norms,
    softmax_rows,
    softmax_t,
)

finite_vectors = st.lists(
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False),
    min_size=1,
    max_size=12,
)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_array_equal(l2_normalize([3.0, 4.0]), [0.6, 0.8])

    def test_unit_vector_unchanged(self):
        e1 = np.array([1.0, 0.0, 0.0])
        np.testing.assert_array_equal(l2_normalize(e1), e1)

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroNormError):
            l2_normalize([0.0, 0.0])
        with pytest.raises(ZeroNormError):
            l2_normalize([1e-13, 0.0])

    def test_direction_preserved(self):
        v = np.array([-2.0, 1.0, 2.0])
        w = l2_normalize(v)
        np.testing.assert_allclose(w * 3.0, v, atol=1e-15)

    def test_idempotent_bitwise_seeded(self):
        """normalize(normalize(v)) == normalize(v) down to the last bit."""
        rng = make_rng(123)
        for _ in range(500):
            v = rng.standard_normal(int(rng.integers(1, 16))) * 10.0 ** rng.integers(-6, 7)
            w = l2_normalize(v)
            assert np.array_equal(l2_normalize(w), w)

    @settings(max_examples=200, deadline=None)
    @given(finite_vectors)
    def test_idempotent_bitwise_hypothesis(self, values):
        v = np.asarray(values)
        norm = math.sqrt(float(np.dot(v, v)))
        if norm <= 1e-6:
            return
        w = l2_normalize(v)
        assert np.array_equal(l2_normalize(w), w)
        assert abs(float(np.dot(w, w)) - 1.0) < 1e-12


class TestLogSumExp:
    def test_single_element(self):
        assert log_sum_exp([0.0]) == 0.0
        assert log_sum_exp([-3.5]) == -3.5

    def test_two_equal_elements(self):
        a = 1.7
        np.testing.assert_allclose(log_sum_exp([a, a]), a + math.log(2.0), rtol=1e-15)

    def test_overflow_guard(self):
        out = log_sum_exp([1000.0, 1000.0])
        assert math.isfinite(out)
        np.testing.assert_allclose(out, 1000.0 + math.log(2.0), rtol=1e-15)
        assert math.isfinite(log_sum_exp([1e300, -1e300]))

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            log_sum_exp([])

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            log_sum_exp([0.0, np.nan])

    @settings(max_examples=200, deadline=None)
    @given(finite_vectors)
    def test_envelope(self, values):
        """max(v) <= LSE(v) <= max(v) + ln(len(v))."""
        v = np.asarray(values)
        out = log_sum_exp(v)
        assert out >= float(np.max(v))
        assert out <= float(np.max(v)) + math.log(len(values)) + 1e-12

    def test_rows_variant_matches_scalar(self):
        rng = make_rng(7)
        a = rng.standard_normal((5, 4, 3)) * 20.0
        out = logsumexp_rows(a)
        for idx in np.ndindex(5, 4):
            np.testing.assert_allclose(out[idx], log_sum_exp(a[idx]), rtol=1e-14)


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax_t([0.0, 0.0], 1.0), [0.5, 0.5], atol=1e-15)

    def test_log_two_case(self):
        """logits (ln 2, 0) at temperature 1 put exactly twice the mass on the first entry."""
        out = softmax_t([math.log(2.0), 0.0], 1.0)
        np.testing.assert_allclose(out, [2.0 / 3.0, 1.0 / 3.0], rtol=1e-14)

    def test_high_temperature_is_uniform(self):
        out = softmax_t([13.0, -7.0, 2.0], 1e9)
        np.testing.assert_allclose(out, 1.0 / 3.0, atol=1e-6)

    def test_temperature_must_be_positive(self):
        with pytest.raises(NonPositiveTemperatureError):
            softmax_t([1.0, 2.0], 0.0)
        with pytest.raises(NonPositiveTemperatureError):
            softmax_t([1.0, 2.0], -1.0)

    def test_sums_to_one_across_temperatures(self):
        """Row sum stays within 1e-12 of 1 for logits in [-50, 50], temperature 1e-3..1e3."""
        rng = make_rng(17)
        for _ in range(300):
            n = int(rng.integers(1, 12))
            logits = rng.uniform(-50.0, 50.0, size=n)
            temp = float(10.0 ** rng.uniform(-3, 3))
            out = softmax_t(logits, temp)
            assert np.all(out >= 0.0)
            assert abs(float(np.sum(out)) - 1.0) < 1e-12
            if np.ptp(logits) / temp < 700.0:
                # spread small enough that no entry underflows to zero
                assert np.all(out > 0.0)

    def test_rows_variant_matches_scalar(self):
        rng = make_rng(23)
        a = rng.uniform(-40.0, 40.0, size=(6, 5))
        out = softmax_rows(a)
        for i in range(6):
            np.testing.assert_allclose(out[i], softmax_t(a[i], 1.0), rtol=1e-13)


class TestDot:
    def test_basis_vectors(self):
        assert dot([1.0, 0.0], [1.0, 0.0]) == 1.0
        assert dot([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_hand_value(self):
        assert dot([1.0, 2.0], [3.0, 4.0]) == 11.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            dot([1.0, 2.0], [1.0, 2.0, 3.0])


class TestRows:
    def test_row_norms(self):
        m = np.array([[3.0, 4.0], [0.0, 2.0]])
        np.testing.assert_array_equal(row_norms(m), [5.0, 2.0])

    def test_normalize_rows_matches_vector_path(self):
        rng = make_rng(31)
        m = rng.standard_normal((8, 5))
        out = normalize_rows(m)
        for i in range(8):
            np.testing.assert_allclose(out[i], l2_normalize(m[i]), atol=1e-15)

    def test_normalize_rows_zero_row(self):
        with pytest.raises(ZeroNormError):
            normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestSeededRng:
    def test_equal_seeds_equal_streams(self):
        a = make_rng(99).standard_normal(10_000)
        b = make_rng(99).standard_normal(10_000)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = make_rng(1).standard_normal(64)
        b = make_rng(2).standard_normal(64)
        assert not np.array_equal(a, b)
