import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfp.errors import ConfigError, InvalidInputError
from cfp.tensor_ops import (
    elementwise_product_reduce,
    global_avg_pool,
    minmax_normalize,
    sigmoid_gate,
    softmax_argmax,
)

finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
vectors = st.lists(finite_floats, min_size=1, max_size=32).map(np.array)


class TestGlobalAvgPool:
    def test_constant_input(self):
        np.testing.assert_array_equal(global_avg_pool(np.ones((2, 2, 2, 2))), [1.0, 1.0])

    def test_two_element_mean(self):
        t = np.array([[0.0, 2.0], [4.0, 4.0]])
        np.testing.assert_array_equal(global_avg_pool(t), [1.0, 4.0])

    def test_matches_scalar_loop(self, rng):
        t = rng.standard_normal((4, 3, 5, 5))
        expected = []
        for c in range(4):
            acc, n = 0.0, 0
            for d in range(3):
                for h in range(5):
                    for w in range(5):
                        acc += t[c, d, h, w]
                        n += 1
            expected.append(acc / n)
        np.testing.assert_allclose(global_avg_pool(t), expected, atol=1e-12)

    def test_vector_input_is_identity(self):
        v = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(global_avg_pool(v), v)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            global_avg_pool(np.zeros((0, 3)))


class TestMinmaxNormalize:
    def test_affine_rescale(self):
        np.testing.assert_array_equal(minmax_normalize(np.array([2.0, 4.0, 6.0])), [0, 0.5, 1])

    def test_degenerate_constant(self):
        np.testing.assert_array_equal(minmax_normalize(np.array([5.0, 5.0])), [0.0, 0.0])

    def test_negative_values(self):
        np.testing.assert_array_equal(minmax_normalize(np.array([-1.0, 0.0, 3.0])), [0, 0.25, 1])

    @given(vectors)
    def test_output_in_unit_interval(self, v):
        out = minmax_normalize(v)
        assert out.min() >= 0.0 and out.max() <= 1.0

    @given(vectors)
    def test_nonconstant_hits_exact_bounds(self, v):
        out = minmax_normalize(v)
        if v.max() > v.min():
            assert out.min() == 0.0
            assert out.max() == 1.0


class TestSigmoidGate:
    def test_score_at_threshold_is_half(self):
        res = sigmoid_gate(np.array([0.6]), 0.6)
        assert res.scores[0] == pytest.approx(0.5, abs=1e-12)
        assert 0 not in res.selected

    def test_selection_above_threshold(self):
        res = sigmoid_gate(np.array([0.2, 0.7, 1.0]), 0.6)
        assert res.selected == {1, 2}

    def test_closed_form_score(self):
        res = sigmoid_gate(np.array([1.0]), 0.6)
        assert res.scores[0] == pytest.approx(1.0 / (1.0 + math.exp(-0.4)), abs=1e-12)

    @pytest.mark.parametrize("theta", [0.0, 1.0, -0.5, 1.5])
    def test_theta_out_of_range(self, theta):
        with pytest.raises(ConfigError):
            sigmoid_gate(np.array([0.5]), theta)

    @given(vectors.map(minmax_normalize))
    def test_scores_monotone_in_value(self, v):
        res = sigmoid_gate(v, 0.5)
        order = np.argsort(v, kind="stable")
        assert np.all(np.diff(res.scores[order]) >= 0)

    @given(
        vectors.map(minmax_normalize),
        st.floats(min_value=0.05, max_value=0.95),
        st.floats(min_value=0.05, max_value=0.95),
    )
    def test_higher_theta_selects_subset(self, v, t1, t2):
        lo, hi = min(t1, t2), max(t1, t2)
        assert sigmoid_gate(v, hi).selected <= sigmoid_gate(v, lo).selected

    @given(vectors, st.floats(min_value=0.05, max_value=0.95))
    @settings(max_examples=50)
    def test_nonconstant_normalized_never_empty(self, v, theta):
        if v.max() == v.min():
            return
        res = sigmoid_gate(minmax_normalize(v), theta)
        assert res.selected


class TestElementwiseProductReduce:
    def test_single_factor(self):
        out = elementwise_product_reduce(np.array([0.2, 0.8]), [np.array([1.0, 0.5])])
        np.testing.assert_allclose(out, [0.2, 0.4])

    def test_ones_identity(self, rng):
        a = rng.random(6)
        np.testing.assert_array_equal(elementwise_product_reduce(a, [np.ones(6)]), a)

    def test_annihilating_factors(self):
        out = elementwise_product_reduce(
            np.array([0.5, 0.5]), [np.array([0.0, 1.0]), np.array([1.0, 0.0])]
        )
        np.testing.assert_array_equal(out, [0.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            elementwise_product_reduce(np.ones(3), [np.ones(2)])

    def test_empty_ws(self):
        with pytest.raises(InvalidInputError):
            elementwise_product_reduce(np.ones(3), [])

    @given(st.lists(st.lists(finite_floats, min_size=4, max_size=4), min_size=2, max_size=4))
    def test_order_invariant(self, rows):
        a = np.array(rows[0])
        ws = [np.array(r) for r in rows[1:]]
        forward = elementwise_product_reduce(a, ws)
        reverse = elementwise_product_reduce(a, ws[::-1])
        np.testing.assert_allclose(forward, reverse, rtol=1e-12, atol=1e-12)


class TestSoftmaxArgmax:
    def test_symmetric_tie_goes_low(self):
        probs, cls = softmax_argmax(np.array([0.0, 0.0]))
        np.testing.assert_allclose(probs, [0.5, 0.5])
        assert cls == 0

    def test_closed_form(self):
        probs, cls = softmax_argmax(np.array([1.0, 3.0]))
        e2 = math.exp(2.0)
        np.testing.assert_allclose(probs, [1.0 / (1.0 + e2), e2 / (1.0 + e2)], atol=1e-12)
        assert cls == 1

    def test_dominant_logit(self):
        _, cls = softmax_argmax(np.array([10.0, -10.0, 0.0]))
        assert cls == 0

    @given(vectors)
    def test_probs_sum_to_one(self, v):
        probs, _ = softmax_argmax(v)
        assert abs(probs.sum() - 1.0) < 1e-9

    @given(
        st.lists(finite_floats, min_size=1, max_size=32).map(
            lambda xs: np.round(np.array(xs), 6)
        ),
        st.floats(min_value=-100, max_value=100),
    )
    def test_shift_invariance(self, v, c):
        # rounding keeps logit gaps far above the ulp of the shifted values,
        # so the shift itself cannot erase distinctions before the call
        p1, c1 = softmax_argmax(v)
        p2, c2 = softmax_argmax(v + c)
        assert c1 == c2
        np.testing.assert_allclose(p1, p2, atol=1e-9)
