"""Outlier channel selection: scores, clustering, and partitions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modquant.mocd import (
    ChannelPartition,
    MocdConfig,
    build_partition,
    jaccard,
    percentile_rank,
    select_topk,
    text_score,
    trivial_partition,
    vision_score,
)
from modquant.synth import SynthConfig, generate
from modquant.tensor import ActivationBatch


def _batch(text, vision):
    text = np.atleast_2d(np.asarray(text, dtype=np.float64))
    vision = np.atleast_2d(np.asarray(vision, dtype=np.float64))
    data = np.concatenate([text, vision], axis=0)
    tags = [0] * text.shape[0] + [1] * vision.shape[0]
    return ActivationBatch(data, tags)


class TestPartitionValidation:
    def test_trivial(self):
        p = trivial_partition(4)
        assert p.c_main.tolist() == [0, 1, 2, 3]
        assert p.c_text.size == 0 and p.c_vision.size == 0

    def test_rejects_overlap(self):
        with pytest.raises(ValueError, match="disjoint"):
            ChannelPartition([0, 1], [1], [2], 4)

    def test_rejects_gap(self):
        with pytest.raises(ValueError, match="cover"):
            ChannelPartition([0, 1], [3], [], 4)

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError, match="ascending"):
            ChannelPartition([1, 0], [2], [], 3)

    def test_rejects_outlier_majority(self):
        with pytest.raises(ValueError, match="main set"):
            ChannelPartition([0], [1, 2], [], 3)


class TestMocdConfig:
    def test_ratio_bounds(self):
        with pytest.raises(ValueError):
            MocdConfig(ratio_vision=0.6)
        with pytest.raises(ValueError):
            MocdConfig(ratio_text=-0.1)

    def test_cardinality_rounding(self):
        cfg = MocdConfig(ratio_vision=0.02, ratio_text=0.02)
        assert cfg.k_vision(64) == 1
        assert cfg.k_vision(100) == 2
        assert cfg.k_text(64) == 1
        assert MocdConfig(ratio_vision=0.0).k_vision(64) == 0


class TestVisionScore:
    def test_hand_value(self):
        b = _batch([[0.0, 0.0]], [[1.0, -5.0], [2.0, 3.0]])
        np.testing.assert_array_equal(vision_score(b), [2.0, 5.0])

    def test_single_token(self):
        b = _batch([[0.0, 0.0]], [[-3.0, 0.5]])
        np.testing.assert_array_equal(vision_score(b), [3.0, 0.5])

    def test_all_zero(self):
        b = _batch([[1.0, 1.0]], [[0.0, 0.0]])
        assert not vision_score(b).any()

    def test_no_vision_tokens(self):
        b = ActivationBatch(np.ones((2, 2)), [0, 0])
        with pytest.raises(ValueError, match="vision"):
            vision_score(b)


class TestTopK:
    def test_tie_resolved_by_lower_index(self):
        assert select_topk(np.array([3.0, 1.0, 3.0, 2.0]), 2).tolist() == [0, 2]

    def test_k_zero(self):
        assert select_topk(np.array([1.0, 2.0]), 0).size == 0

    def test_k_full(self):
        assert select_topk(np.array([1.0, 2.0, 0.5]), 3).tolist() == [0, 1, 2]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            select_topk(np.array([1.0]), 2)

    def test_result_sorted_ascending(self):
        got = select_topk(np.array([0.1, 5.0, 0.2, 4.0, 3.0]), 3)
        assert got.tolist() == sorted(got.tolist()) == [1, 3, 4]


class TestPercentileRank:
    def test_hand_values(self):
        b = _batch([[0.1, 0.3, 0.2]], [[0.0, 0.0, 0.0]])
        ranks = percentile_rank(b, np.array([0, 1, 2]))
        np.testing.assert_allclose(ranks, [[1 / 3, 1.0, 2 / 3]])

    def test_constant_row_ranks_one(self):
        b = _batch([[0.5, 0.5, 0.5]], [[0.0, 0.0, 0.0]])
        ranks = percentile_rank(b, np.array([0, 1, 2]))
        np.testing.assert_array_equal(ranks, np.ones((1, 3)))

    def test_strict_max_has_rank_one(self):
        rng = np.random.default_rng(8)
        data = rng.standard_normal((5, 6))
        data[:, 2] = 100.0
        b = ActivationBatch(np.concatenate([data, data]), [0] * 5 + [1] * 5)
        ranks = percentile_rank(b, np.arange(6))
        np.testing.assert_array_equal(ranks[:, 2], np.ones(5))

    def test_empty_candidates(self):
        b = _batch([[1.0]], [[1.0]])
        with pytest.raises(ValueError, match="empty"):
            percentile_rank(b, np.empty(0, dtype=np.int64))


class TestTextScore:
    def test_constant_sequence_scores_zero(self):
        ranks = np.full((6, 2), 0.5)
        np.testing.assert_array_equal(text_score(ranks, 3), [0.0, 0.0])

    def test_two_level_sequence_with_two_clusters(self):
        ranks = np.array([[0.0], [0.0], [1.0], [1.0]])
        assert text_score(ranks, 2)[0] == 0.0

    def test_single_cluster_is_population_variance(self):
        col = np.array([0.1, 0.5, 0.9, 0.3])
        got = text_score(col.reshape(-1, 1), 1)[0]
        assert got == pytest.approx(np.var(col))

    def test_cluster_count_exceeds_tokens(self):
        with pytest.raises(ValueError):
            text_score(np.zeros((2, 1)), 3)

    def test_unstable_channel_scores_higher(self):
        # Instability here means ranks spread across many levels, which no
        # small set of cluster centers can absorb; a tightly concentrated
        # rank sequence clusters to near-zero variance.
        rng = np.random.default_rng(9)
        stable = np.full(40, 0.5) + rng.normal(0, 0.01, 40)
        unstable = rng.uniform(0.0, 1.0, 40)
        ranks = np.stack([stable, unstable], axis=1)
        scores = text_score(ranks, 3)
        assert scores[1] > scores[0]


class TestBuildPartition:
    def test_zero_ratios_give_trivial_partition(self):
        b = _batch(np.ones((2, 4)), np.ones((2, 4)))
        p = build_partition(b, MocdConfig(ratio_vision=0.0, ratio_text=0.0))
        assert p.c_main.tolist() == [0, 1, 2, 3]

    def test_planted_vision_channels_recovered(self):
        batch = generate(SynthConfig(seed=0))
        p = build_partition(batch, MocdConfig(ratio_vision=2 / 64, ratio_text=2 / 64))
        assert p.c_vision.tolist() == [3, 9]

    def test_planted_text_channels_recovered(self):
        batch = generate(SynthConfig(seed=0))
        p = build_partition(batch, MocdConfig(ratio_vision=2 / 64, ratio_text=2 / 64))
        assert p.c_text.tolist() == [17, 42]

    def test_deterministic(self):
        batch = generate(SynthConfig(seed=5))
        cfg = MocdConfig(ratio_vision=0.05, ratio_text=0.05)
        p1 = build_partition(batch, cfg)
        p2 = build_partition(batch, cfg)
        np.testing.assert_array_equal(p1.c_main, p2.c_main)
        np.testing.assert_array_equal(p1.c_text, p2.c_text)
        np.testing.assert_array_equal(p1.c_vision, p2.c_vision)

    def test_missing_modality_with_nonzero_ratio(self):
        b = ActivationBatch(np.ones((4, 8)), [0, 0, 0, 0])
        with pytest.raises(ValueError, match="vision"):
            build_partition(b, MocdConfig(ratio_vision=0.25, ratio_text=0.0))

    @given(st.integers(0, 2**32 - 1), st.integers(4, 16), st.integers(4, 12))
    @settings(max_examples=60, deadline=None)
    def test_partition_invariants(self, seed, dim, tokens):
        rng = np.random.default_rng(seed)
        data = rng.standard_normal((2 * tokens, dim))
        b = ActivationBatch(data, [0] * tokens + [1] * tokens)
        cfg = MocdConfig(
            ratio_vision=rng.uniform(0.0, 0.25), ratio_text=rng.uniform(0.0, 0.25)
        )
        p = build_partition(b, cfg)
        merged = np.concatenate([p.c_main, p.c_text, p.c_vision])
        assert sorted(merged.tolist()) == list(range(dim))
        assert len(p.c_vision) == cfg.k_vision(dim)
        assert len(p.c_text) == cfg.k_text(dim)


class TestJaccard:
    def test_hand_value(self):
        assert jaccard([1, 2, 3], [2, 3, 4]) == 0.5

    def test_identical(self):
        assert jaccard([0, 5], [5, 0]) == 1.0

    def test_disjoint(self):
        assert jaccard([0], [1]) == 0.0

    def test_both_empty(self):
        assert jaccard([], []) == 1.0
