"""Weighted-PageRank scoring, head fusion, and the cross-attention baseline."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdglab.errors import (
    AllHeadsFilteredError,
    DegenerateGraphError,
    InvalidInputError,
)
from cdglab.importance import (
    AttentionMap,
    FusionConfig,
    ImportanceScores,
    cross_attention_baseline,
    fuse_heads,
    head_variance,
    wpr_all_heads,
    wpr_single_head,
)


def positive_matrix(seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.05, 1.0, size=(n, n))


def power_iteration_oracle(a: np.ndarray, iters: int = 10_000) -> np.ndarray:
    at = (a / a.sum(axis=1, keepdims=True)).T
    s = np.full(a.shape[0], 1.0 / a.shape[0])
    for _ in range(iters):
        s = at @ s
        s /= s.sum()
    return s


class TestWprSingleHead:
    def test_uniform_matrix_uniform_scores(self):
        n = 6
        out = wpr_single_head(np.full((n, n), 1.0 / n))
        np.testing.assert_allclose(out.scores, 1.0 / n, atol=1e-12)
        assert out.converged

    def test_absorbing_column(self):
        # every token attends only to token 2
        a = np.zeros((5, 5))
        a[:, 2] = 1.0
        out = wpr_single_head(a)
        expected = np.zeros(5)
        expected[2] = 1.0
        np.testing.assert_allclose(out.scores, expected, atol=1e-12)
        assert out.sorted_indices[0] == 2

    def test_matches_power_iteration_oracle(self):
        a = positive_matrix(0, 8)
        out = wpr_single_head(a)
        assert np.abs(out.scores - power_iteration_oracle(a)).sum() < 1e-8

    def test_zero_row_rejected(self):
        a = np.ones((4, 4))
        a[1] = 0.0
        with pytest.raises(DegenerateGraphError):
            wpr_single_head(a)

    def test_non_square_rejected(self):
        with pytest.raises(InvalidInputError):
            wpr_single_head(np.ones((3, 4)))

    def test_budget_exhaustion_sets_flag(self):
        out = wpr_single_head(positive_matrix(1, 16), max_iters=1)
        assert not out.converged

    def test_tie_break_by_position(self):
        out = wpr_single_head(np.full((4, 4), 0.25))
        np.testing.assert_array_equal(out.sorted_indices, [0, 1, 2, 3])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 16))
    def test_fixed_point_residual(self, seed, n):
        a = positive_matrix(seed, n)
        eps = 1e-8
        out = wpr_single_head(a, epsilon=eps)
        at = (a / a.sum(axis=1, keepdims=True)).T
        step = at @ out.scores
        step /= step.sum()
        assert np.abs(step - out.scores).sum() < 10 * eps

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), exponent=st.integers(-8, 8))
    def test_power_of_two_scaling_exact(self, seed, exponent):
        a = positive_matrix(seed, 8)
        base = wpr_single_head(a)
        scaled = wpr_single_head(a * 2.0**exponent)
        np.testing.assert_array_equal(base.scores, scaled.scores)

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        alpha=st.floats(1e-3, 1e3, allow_nan=False, allow_infinity=False),
    )
    def test_general_scaling_invariance(self, seed, alpha):
        a = positive_matrix(seed, 8)
        base = wpr_single_head(a)
        scaled = wpr_single_head(a * alpha)
        np.testing.assert_allclose(base.scores, scaled.scores, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        a = positive_matrix(seed, 8)
        perm = rng.permutation(8)
        permuted = a[np.ix_(perm, perm)]
        base = wpr_single_head(a, epsilon=1e-12)
        out = wpr_single_head(permuted, epsilon=1e-12)
        np.testing.assert_allclose(out.scores, base.scores[perm], atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 64))
    def test_positive_maps_converge(self, seed, n):
        logits = np.random.default_rng(seed).normal(size=(n, n))
        attn = np.exp(logits - logits.max(axis=1, keepdims=True))
        attn /= attn.sum(axis=1, keepdims=True)
        out = wpr_single_head(attn, epsilon=1e-9, max_iters=200)
        assert out.converged
        assert abs(out.scores.sum() - 1.0) < 1e-9


class TestWprAllHeads:
    def test_matches_single_head(self):
        heads = np.stack([positive_matrix(s, 16) for s in range(4)])
        batched = wpr_all_heads(AttentionMap(heads=heads))
        for head, out in zip(heads, batched):
            single = wpr_single_head(head)
            assert np.abs(out.scores - single.scores).sum() < 1e-6
            np.testing.assert_array_equal(out.sorted_indices, single.sorted_indices)
            assert out.converged

    def test_zero_row_rejected(self):
        heads = np.ones((2, 4, 4))
        heads[1, 2] = 0.0
        with pytest.raises(DegenerateGraphError):
            wpr_all_heads(AttentionMap(heads=heads))

    def test_attention_map_validation(self):
        with pytest.raises(InvalidInputError):
            AttentionMap(heads=np.ones((2, 3, 4)))
        with pytest.raises(InvalidInputError):
            AttentionMap(heads=-np.ones((2, 3, 3)))


class TestHeadVariance:
    def test_uniform_scores_zero(self):
        s = ImportanceScores(scores=np.full(4, 0.25), sorted_indices=np.arange(4))
        assert head_variance(s) == 0.0

    def test_one_hot_scores(self):
        s = ImportanceScores(
            scores=np.array([1.0, 0.0, 0.0, 0.0]), sorted_indices=np.arange(4)
        )
        # population variance of {1, 0, 0, 0}
        assert abs(head_variance(s) - 0.1875) < 1e-15

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        raw = np.random.default_rng(seed).uniform(size=8)
        s = ImportanceScores(scores=raw / raw.sum(), sorted_indices=np.arange(8))
        assert head_variance(s) >= 0.0


class TestFuseHeads:
    def _scores(self, values) -> ImportanceScores:
        raw = np.asarray(values, dtype=np.float64)
        s = raw / raw.sum()
        return ImportanceScores(
            scores=s, sorted_indices=np.argsort(-s, kind="stable")
        )

    def test_single_head_identity_on_ranking(self):
        head = self._scores([0.1, 0.5, 0.2, 0.2])
        fused = fuse_heads([head], FusionConfig())
        np.testing.assert_array_equal(fused.sorted_indices, head.sorted_indices)
        np.testing.assert_allclose(fused.scores, head.scores, atol=1e-12)

    def test_identical_heads_fuse_to_each(self):
        head = self._scores([0.4, 0.3, 0.2, 0.1])
        fused = fuse_heads([head, head, head], None)
        np.testing.assert_allclose(fused.scores, head.scores, atol=1e-12)

    def test_variance_filter_excludes_uniform_head(self):
        uniform = self._scores([1.0, 1.0, 1.0, 1.0])
        peaked = self._scores([0.7, 0.1, 0.1, 0.1])
        cfg = FusionConfig(v_min=1e-6, v_max=1.0, enabled=True)
        fused = fuse_heads([uniform, peaked], cfg)
        np.testing.assert_allclose(fused.scores, peaked.scores, atol=1e-12)

    def test_all_heads_filtered_rejected(self):
        uniform = self._scores([1.0, 1.0, 1.0, 1.0])
        cfg = FusionConfig(v_min=1e-6, v_max=1.0, enabled=True)
        with pytest.raises(AllHeadsFilteredError):
            fuse_heads([uniform], cfg)

    def test_empty_input_rejected(self):
        with pytest.raises(InvalidInputError):
            fuse_heads([], None)

    def test_fused_scores_normalized(self):
        heads = [self._scores([0.5, 0.3, 0.2]), self._scores([0.1, 0.8, 0.1])]
        fused = fuse_heads(heads, None)
        assert abs(fused.scores.sum() - 1.0) < 1e-9

    def test_bad_config_rejected(self):
        with pytest.raises(InvalidInputError):
            FusionConfig(v_min=0.5, v_max=0.1, enabled=True)

    def test_percentile_constructor(self):
        cfg = FusionConfig.from_percentiles([0.1, 0.2, 0.3, 0.4])
        assert cfg.enabled and cfg.v_min <= cfg.v_max


class TestCrossAttentionBaseline:
    def test_single_hot_column(self):
        c = np.zeros((3, 4))
        c[:, 1] = 1.0
        out = cross_attention_baseline(c)
        np.testing.assert_allclose(out.scores, [0.0, 1.0, 0.0, 0.0], atol=1e-12)

    def test_uniform_matrix(self):
        out = cross_attention_baseline(np.full((5, 4), 0.25))
        np.testing.assert_allclose(out.scores, 0.25, atol=1e-12)

    def test_negative_entries_rejected(self):
        with pytest.raises(InvalidInputError):
            cross_attention_baseline(np.array([[1.0, -1.0]]))

    def test_diverges_from_wpr_on_constructed_pair(self):
        # Cross-attention: the image patches dump mass on the final
        # (context-aggregating) text column, so the column sum crowns it.
        cross = np.full((6, 4), 0.05)
        cross[:, 3] = 0.85
        # Companion self-attention: token 1 is the hub every token cites.
        self_attn = np.full((4, 4), 0.04)
        self_attn[:, 1] = 0.88
        assert cross_attention_baseline(cross).sorted_indices[0] == 3
        assert wpr_single_head(self_attn).sorted_indices[0] == 1
