import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smora.numerics import make_rng
from smora.routing import (
    GateDecision,
    RouterParams,
    RoutingStats,
    accumulate_stats,
    counts_from_indices,
    gate,
    init_router,
    max_vio,
    update_bias,
)


def router_from(w_g, bias=None, u=1e-5):
    w_g = np.asarray(w_g, dtype=float)
    bias = np.zeros(w_g.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    return RouterParams(w_g=w_g, bias=bias, update_rate=u)


class TestGate:
    def test_hand_evaluated_selection_and_weights(self):
        router = router_from([[1, 0], [0, 1], [-1, 0]])
        dec = gate(router, np.array([2.0, 1.0]), k=2)
        np.testing.assert_array_equal(dec.indices, [0, 1])
        # softmax over retained scores (2, 1)
        np.testing.assert_allclose(dec.weights, [0.7311, 0.2689], atol=1e-4)

    def test_k1_weight_is_one(self, rng):
        router = router_from(rng.standard_normal((5, 3)))
        dec = gate(router, rng.standard_normal(3), k=1)
        assert dec.weights.shape == (1,)
        assert dec.weights[0] == pytest.approx(1.0)

    def test_bias_flips_selection_but_not_singleton_weight(self):
        # unbiased scores (0, 1, 2): index 2 wins; bias +10 on index 0 flips it
        router = router_from(np.eye(3), bias=[0.0, 0.0, 0.0])
        x = np.array([0.0, 1.0, 2.0])
        assert gate(router, x, k=1).indices[0] == 2
        router.bias = np.array([10.0, 0.0, 0.0])
        dec = gate(router, x, k=1)
        assert dec.indices[0] == 0
        np.testing.assert_array_equal(dec.weights, [1.0])

    def test_k_out_of_range_and_shape_mismatch(self, rng):
        router = router_from(rng.standard_normal((4, 3)))
        with pytest.raises(ValueError):
            gate(router, rng.standard_normal(3), k=0)
        with pytest.raises(ValueError):
            gate(router, rng.standard_normal(3), k=5)
        with pytest.raises(ValueError):
            gate(router, rng.standard_normal(2), k=1)

    def test_indices_ascending_weights_normalized(self, rng):
        router = router_from(rng.standard_normal((8, 4)))
        for _ in range(20):
            dec = gate(router, rng.standard_normal(4), k=3)
            assert np.all(np.diff(dec.indices) > 0)
            assert abs(dec.weights.sum() - 1.0) <= 1e-12
            assert np.all(dec.weights >= 0)

    def test_uniform_bias_shift_never_changes_selection(self, rng):
        router = router_from(rng.standard_normal((6, 4)))
        for _ in range(20):
            x = rng.standard_normal(4)
            base = gate(router, x, k=2).indices
            router.bias = router.bias + 3.7
            shifted = gate(router, x, k=2).indices
            router.bias = router.bias - 3.7
            np.testing.assert_array_equal(base, shifted)

    def test_weights_ignore_bias_while_selection_fixed(self, rng):
        # default mode: same selected set => bit-identical weights whatever the bias
        router = router_from(rng.standard_normal((5, 3)))
        x = rng.standard_normal(3)
        before = gate(router, x, k=2)
        router.bias = router.bias + 1e-9  # tiny: selection set unchanged
        after = gate(router, x, k=2)
        np.testing.assert_array_equal(before.indices, after.indices)
        np.testing.assert_array_equal(before.weights, after.weights)

    def test_bias_in_weights_follows_biased_scores(self):
        router = router_from(np.eye(2), bias=[1.0, 0.0])
        x = np.array([1.0, 1.0])
        dec = gate(router, x, k=2, bias_in_weights=True)
        # retained biased scores are (2, 1)
        np.testing.assert_allclose(dec.weights, [0.7311, 0.2689], atol=1e-4)


class TestUpdateBias:
    def test_hand_evaluated(self):
        router = router_from(np.zeros((3, 2)), u=0.01)
        update_bias(router, RoutingStats(np.array([10, 0, 2]), total_tokens=6))
        # mean count 4 -> errors (-6, 4, 2) -> signs (-1, +1, +1)
        np.testing.assert_allclose(router.bias, [-0.01, 0.01, 0.01])

    def test_balanced_counts_leave_bias_alone(self):
        router = router_from(np.zeros((4, 2)), u=0.5)
        update_bias(router, RoutingStats(np.array([3, 3, 3, 3]), total_tokens=12))
        np.testing.assert_array_equal(router.bias, np.zeros(4))

    def test_default_update_rate_magnitude(self):
        router = init_router(2, 3, make_rng(0))
        assert router.update_rate == 1e-5
        update_bias(router, RoutingStats(np.array([2, 0]), total_tokens=1))
        np.testing.assert_allclose(router.bias, [-1e-5, 1e-5])

    def test_rejects_wrong_length(self):
        router = router_from(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            update_bias(router, RoutingStats(np.array([1, 2]), total_tokens=2))

    def test_monotone_corrective_on_uniform_scores(self):
        # all unbiased scores equal: after one update, previously underloaded
        # ranks must win the selection
        router = router_from(np.zeros((3, 2)), u=0.1)
        update_bias(router, RoutingStats(np.array([9, 1, 2]), total_tokens=6))
        dec = gate(router, np.ones(2), k=2)
        np.testing.assert_array_equal(dec.indices, [1, 2])


class TestStats:
    def test_direct_count(self):
        decisions = [
            GateDecision(np.array([0, 1]), np.array([0.5, 0.5])),
            GateDecision(np.array([0, 2]), np.array([0.5, 0.5])),
        ]
        stats = accumulate_stats(decisions, r=4)
        np.testing.assert_array_equal(stats.counts, [2, 1, 1, 0])
        assert stats.total_tokens == 2

    def test_empty_sequence(self):
        stats = accumulate_stats([], r=3)
        np.testing.assert_array_equal(stats.counts, [0, 0, 0])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            accumulate_stats([GateDecision(np.array([5]), np.array([1.0]))], r=3)

    def test_merge_equals_combined(self, rng):
        def random_decisions(n):
            return [
                GateDecision(np.sort(rng.choice(6, size=2, replace=False)), np.array([0.5, 0.5]))
                for _ in range(n)
            ]

        d1, d2 = random_decisions(5), random_decisions(7)
        merged = accumulate_stats(d1, 6).merge(accumulate_stats(d2, 6))
        combined = accumulate_stats(d1 + d2, 6)
        np.testing.assert_array_equal(merged.counts, combined.counts)
        assert merged.total_tokens == combined.total_tokens

    @settings(max_examples=30, deadline=None)
    @given(
        counts=st.lists(st.integers(min_value=0, max_value=50), min_size=2, max_size=8),
        counts2=st.lists(st.integers(min_value=0, max_value=50), min_size=2, max_size=8),
    )
    def test_merge_commutative(self, counts, counts2):
        n = min(len(counts), len(counts2))
        s1 = RoutingStats(np.array(counts[:n]), total_tokens=10)
        s2 = RoutingStats(np.array(counts2[:n]), total_tokens=3)
        ab = s1.merge(s2)
        ba = s2.merge(s1)
        np.testing.assert_array_equal(ab.counts, ba.counts)
        assert ab.total_tokens == ba.total_tokens

    def test_counts_from_indices_matches_decisions(self, rng):
        idx = np.stack([np.sort(rng.choice(8, size=3, replace=False)) for _ in range(40)])
        via_table = counts_from_indices(idx, 8)
        via_decisions = accumulate_stats(
            [GateDecision(row, np.full(3, 1 / 3)) for row in idx], 8
        )
        np.testing.assert_array_equal(via_table.counts, via_decisions.counts)

    def test_invariant_total_times_k(self, rng):
        idx = np.stack([np.sort(rng.choice(8, size=3, replace=False)) for _ in range(40)])
        stats = counts_from_indices(idx, 8)
        assert stats.counts.sum() == stats.total_tokens * 3


class TestMaxVio:
    def test_hand_evaluated(self):
        assert max_vio(RoutingStats(np.array([10, 0, 2]), total_tokens=6)) == pytest.approx(1.5)

    def test_uniform_is_zero(self):
        assert max_vio(RoutingStats(np.array([4, 4, 4]), total_tokens=12)) == 0.0

    def test_zero_tokens_rejected(self):
        with pytest.raises(ValueError):
            max_vio(RoutingStats(np.array([0, 0]), total_tokens=0))

    def test_json_serialization(self):
        stats = RoutingStats(np.array([10, 0, 2]), total_tokens=6)
        payload = json.loads(json.dumps(stats.to_json()))
        assert payload["counts"] == [10, 0, 2]
        assert payload["total_tokens"] == 6
        assert payload["max_vio"] == pytest.approx(1.5)


class TestRouterParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            RouterParams(w_g=np.zeros((3, 2)), bias=np.zeros(2))
        with pytest.raises(ValueError):
            RouterParams(w_g=np.zeros((3, 2)), bias=np.zeros(3), update_rate=0.0)
        with pytest.raises(ValueError):
            RouterParams(w_g=np.zeros((3, 2)), bias=np.array([np.inf, 0, 0]))

    def test_skewed_init_rescales_rows(self):
        flat = init_router(8, 16, make_rng(0), skew=0.0)
        skew = init_router(8, 16, make_rng(0), skew=3.0)
        ratio = np.linalg.norm(skew.w_g, axis=1) / np.linalg.norm(flat.w_g, axis=1)
        assert ratio[-1] / ratio[0] == pytest.approx(np.exp(3.0), rel=1e-12)
