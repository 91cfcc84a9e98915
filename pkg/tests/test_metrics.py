import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltafactor import metrics as mt
from deltafactor.tensor_core import ShapeError

E1 = [1.0, 0.0]
E2 = [0.0, 1.0]
DIAG = [1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)]


class TestAvgCosineSimilarity:
    def test_orthogonal(self):
        assert mt.avg_cosine_similarity([E1], [E2]) == 0.0

    def test_scale_invariance(self):
        assert mt.avg_cosine_similarity([[2.0, 0.0]], [[1.0, 0.0]]) == pytest.approx(1.0)

    def test_mixed_pair_mean(self):
        got = mt.avg_cosine_similarity([E1, E2], [DIAG])
        assert got == pytest.approx(0.70710678, abs=1e-8)

    def test_rejects_zero_vector(self):
        with pytest.raises(ValueError, match="zero-norm"):
            mt.avg_cosine_similarity([[0.0, 0.0]], [E1])

    def test_rejects_width_mismatch(self):
        with pytest.raises(ShapeError, match="widths"):
            mt.avg_cosine_similarity([E1], [[1.0, 0.0, 0.0]])


class TestSquaredCentroidDistance:
    def test_identical_sets(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal((5, 3))
        assert mt.squared_centroid_distance(s, s) == 0.0

    def test_orthogonal_singletons(self):
        assert mt.squared_centroid_distance([E1], [E2]) == pytest.approx(2.0)

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(1)
        s = rng.standard_normal((6, 4))
        t = rng.standard_normal((4, 4))
        scales = rng.uniform(0.1, 10.0, size=(6, 1))
        base = mt.squared_centroid_distance(s, t)
        assert mt.squared_centroid_distance(s * scales, t) == pytest.approx(
            base, rel=1e-12)


class TestIntraDissimilarityAndVariance:
    def test_identical_set_is_zero(self):
        s = [[1.0, 2.0]] * 4
        assert mt.intra_dissimilarity(s) == pytest.approx(0.0, abs=1e-15)
        assert mt.variance_normalized(s) == pytest.approx(0.0, abs=1e-15)

    def test_orthonormal_pair(self):
        assert mt.intra_dissimilarity([E1, E2]) == pytest.approx(0.5)

    @given(st.integers(2, 30), st.integers(2, 8), st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_identity_between_measures(self, n, d, seed):
        s = np.random.default_rng(seed).standard_normal((n, d))
        assert abs(mt.intra_dissimilarity(s) - mt.variance_normalized(s)) < 1e-12


class TestDissimVarianceIdentity:
    def test_unit_singletons_polarization(self):
        # 1 - <u, v> == ||u - v||^2 / 2 for unit vectors
        assert mt.dissim_variance_identity_residual([E1], [E2]) < 1e-15

    def test_same_set_reduces_to_variance(self):
        rng = np.random.default_rng(2)
        s = rng.standard_normal((10, 5))
        assert mt.dissim_variance_identity_residual(s, s) < 1e-12

    def test_random_fifty_vector_sets(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.standard_normal((50, 8))
            b = rng.standard_normal((50, 8))
            assert mt.dissim_variance_identity_residual(a, b) < 1e-10


class TestTextImageAlignment:
    def test_identical_pairs(self):
        rng = np.random.default_rng(4)
        s = rng.standard_normal((7, 6))
        assert mt.text_image_alignment(s, s) == pytest.approx(1.0)

    def test_orthogonal_pairs(self):
        assert mt.text_image_alignment([E1, E2], [E2, E1]) == pytest.approx(0.0)

    def test_mixed_pairs(self):
        assert mt.text_image_alignment([E1, E1], [E1, E2]) == pytest.approx(0.5)

    def test_rejects_count_mismatch(self):
        with pytest.raises(ShapeError, match="match"):
            mt.text_image_alignment([E1, E2], [E1])


class TestVendiScore:
    def test_identical_copies(self):
        assert mt.vendi_score([[3.0, 4.0]] * 5) == pytest.approx(1.0, abs=1e-12)

    def test_orthonormal_triple(self):
        assert mt.vendi_score(np.eye(3)) == pytest.approx(3.0, abs=1e-12)

    def test_mixed_triple_closed_form(self):
        got = mt.vendi_score([E1, E2, DIAG])
        # eigenvalues of K/3 are {2/3, 1/3, 0}: score = 3 / 2^(2/3)
        assert got == pytest.approx(1.88988, abs=1e-4)
        assert got == pytest.approx(3.0 / 2.0 ** (2.0 / 3.0), rel=1e-12)

    def test_duplication_invariance(self):
        rng = np.random.default_rng(5)
        s = rng.standard_normal((6, 4))
        doubled = np.vstack([s, s])
        assert abs(mt.vendi_score(doubled) - mt.vendi_score(s)) < 1e-8

    def test_bounded_by_count(self):
        rng = np.random.default_rng(6)
        s = rng.standard_normal((9, 5))
        score = mt.vendi_score(s)
        assert 1.0 <= score <= 9.0 + 1e-12


class TestGroupedVendi:
    def test_per_group_scores(self):
        vectors = np.vstack([np.eye(3), [[1.0, 0.0, 0.0]] * 2])
        labels = ["a", "a", "a", "b", "b"]
        scores, mean = mt.grouped_vendi(vectors, labels, singletons="skip")
        assert scores["a"] == pytest.approx(3.0, abs=1e-12)
        assert scores["b"] == pytest.approx(1.0, abs=1e-12)
        assert mean == pytest.approx(2.0, abs=1e-12)

    def test_singleton_skip_vs_include(self):
        vectors = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
        labels = ["pair", "pair", "solo"]
        skipped, _ = mt.grouped_vendi(vectors, labels, singletons="skip")
        assert "solo" not in skipped
        included, _ = mt.grouped_vendi(vectors, labels, singletons="include")
        assert included["solo"] == pytest.approx(1.0, abs=1e-12)

    def test_all_singletons_skipped_is_error(self):
        with pytest.raises(ValueError, match="singletons"):
            mt.grouped_vendi([[1.0, 0.0], [0.0, 1.0]], ["a", "b"],
                             singletons="skip")

    def test_mode_is_mandatory(self):
        with pytest.raises(ValueError, match="skip|include"):
            mt.grouped_vendi([[1.0, 0.0]], ["a"], singletons="drop")

    def test_label_count_mismatch(self):
        with pytest.raises(ValueError, match="labels"):
            mt.grouped_vendi([[1.0, 0.0]], ["a", "b"], singletons="skip")


class TestGramAndStyle:
    def test_gram_normalization(self):
        np.testing.assert_allclose(mt.gram_matrix([[[2.0]]]), [[4.0]])

    def test_gram_shape(self):
        fm = np.random.default_rng(7).standard_normal((5, 3, 4))
        assert mt.gram_matrix(fm).shape == (5, 5)

    def test_identical_maps_zero_loss(self):
        rng = np.random.default_rng(8)
        maps = [rng.standard_normal((4, 3, 3)), rng.standard_normal((8, 2, 2))]
        assert mt.style_loss(maps, maps) == 0.0

    def test_unit_map_example(self):
        assert mt.style_loss([[[[2.0]]]], [[[[0.0]]]]) == pytest.approx(16.0)

    def test_pixel_permutation_invariance(self):
        rng = np.random.default_rng(9)
        fm = rng.standard_normal((4, 3, 5))
        ref = rng.standard_normal((4, 2, 2))
        flat = fm.reshape(4, 15)
        shuffled = flat[:, rng.permutation(15)].reshape(4, 3, 5)
        assert mt.style_loss([fm], [ref]) == pytest.approx(
            mt.style_loss([shuffled], [ref]), rel=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(10)
        a = [rng.standard_normal((3, 4, 4))]
        b = [rng.standard_normal((3, 5, 2))]
        assert mt.style_loss(a, b) == pytest.approx(mt.style_loss(b, a), rel=1e-15)

    def test_spatial_sizes_may_differ(self):
        a = [np.ones((2, 3, 3))]
        b = [np.ones((2, 5, 5))]
        assert mt.style_loss(a, b) == pytest.approx(0.0, abs=1e-15)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channel"):
            mt.style_loss([np.ones((2, 2, 2))], [np.ones((3, 2, 2))])

    def test_layer_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="layer count"):
            mt.style_loss([np.ones((2, 2, 2))], [])

    def test_avg_style_loss(self):
        a = [[[2.0]]]
        b = [[[0.0]]]
        assert mt.avg_style_loss([([a], [b]), ([a], [a])]) == pytest.approx(8.0)

    def test_avg_style_loss_empty(self):
        with pytest.raises(ValueError, match="at least one"):
            mt.avg_style_loss([])


class TestSubsample:
    def test_within_limit_returned_whole(self):
        s = np.arange(12, dtype=float).reshape(4, 3)
        np.testing.assert_array_equal(mt.subsample(s, 4), s)
        np.testing.assert_array_equal(mt.subsample(s, 10), s)

    def test_seeded_and_order_preserving(self):
        rng = np.random.default_rng(11)
        s = rng.standard_normal((30, 2))
        a = mt.subsample(s, 10, seed=3)
        b = mt.subsample(s, 10, seed=3)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (10, 2)
        rows = [np.flatnonzero((s == row).all(axis=1))[0] for row in a]
        assert rows == sorted(rows)

    def test_different_seeds_differ(self):
        s = np.arange(100, dtype=float).reshape(50, 2)
        a = mt.subsample(s, 5, seed=0)
        b = mt.subsample(s, 5, seed=1)
        assert not np.array_equal(a, b)

    def test_rejects_bad_limit(self):
        with pytest.raises(ValueError, match="limit"):
            mt.subsample(np.ones((3, 2)), 0)


class TestDiversityRatio:
    def test_same_set_is_one(self):
        rng = np.random.default_rng(12)
        s = rng.standard_normal((8, 4))
        for measure in mt.MEASURES:
            assert mt.diversity_ratio(s, s, measure) == pytest.approx(1.0)

    def test_orthonormal_subset_vendi(self):
        dataset = np.eye(4)
        assert mt.diversity_ratio(dataset[:2], dataset, "vendi") == pytest.approx(0.5)

    def test_singleton_class(self):
        dataset = np.eye(3)
        got = mt.diversity_ratio(dataset[:1], dataset, "vendi")
        assert got == pytest.approx(1.0 / 3.0)

    def test_zero_denominator_rejected(self):
        identical = [[1.0, 0.0]] * 3
        with pytest.raises(ValueError, match="zero"):
            mt.diversity_ratio(identical, identical, "variance")

    def test_unknown_measure(self):
        with pytest.raises(ValueError, match="measure"):
            mt.diversity_ratio(np.eye(2), np.eye(2), "entropy")


def make_record(checkpoint, value, higher=True, **overrides):
    fields = dict(checkpoint=checkpoint, category="cat", class_name="cls",
                  subclass=None, prompt_type="plain", metric="m",
                  value=value, higher_is_better=higher)
    fields.update(overrides)
    return mt.ScoreRecord(**fields)


class TestRankNormalize:
    def test_definitional_example(self):
        records = [make_record("a", 3.2), make_record("b", 1.1),
                   make_record("c", 2.7)]
        out = mt.rank_normalize(records)
        assert [r.value for r in out] == [1.0, 0.0, 0.5]
        assert all(r.higher_is_better for r in out)

    def test_lower_is_better(self):
        records = [make_record("a", 3.2, higher=False),
                   make_record("b", 1.1, higher=False),
                   make_record("c", 2.7, higher=False)]
        out = mt.rank_normalize(records)
        assert [r.value for r in out] == [0.0, 1.0, 0.5]

    def test_ties_share_mean_position(self):
        records = [make_record("a", 5.0), make_record("b", 5.0),
                   make_record("c", 1.0)]
        out = mt.rank_normalize(records)
        assert [r.value for r in out] == [0.75, 0.75, 0.0]

    def test_groups_normalized_independently(self):
        records = [make_record("a", 10.0), make_record("b", 20.0),
                   make_record("a", 5.0, metric="m2"),
                   make_record("b", 1.0, metric="m2")]
        out = mt.rank_normalize(records)
        assert [r.value for r in out] == [0.0, 1.0, 1.0, 0.0]

    def test_no_tie_groups_have_exact_extremes(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            n = int(rng.integers(2, 9))
            values = rng.permutation(n).astype(float)
            records = [make_record(f"c{i}", v) for i, v in enumerate(values)]
            out = [r.value for r in mt.rank_normalize(records)]
            assert out.count(1.0) == 1
            assert out.count(0.0) == 1
            assert all(0.0 <= v <= 1.0 for v in out)

    def test_singleton_group_rejected(self):
        with pytest.raises(ValueError, match="single"):
            mt.rank_normalize([make_record("a", 1.0)])

    def test_mixed_flags_rejected(self):
        with pytest.raises(ValueError, match="mixed"):
            mt.rank_normalize([make_record("a", 1.0),
                               make_record("b", 2.0, higher=False)])

    def test_duplicate_checkpoints_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            mt.rank_normalize([make_record("a", 1.0), make_record("a", 2.0)])

    def test_non_finite_value_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            mt.rank_normalize([make_record("a", float("nan")),
                               make_record("b", 1.0)])


class TestAggregateScores:
    def test_two_stage_mean(self):
        records = [
            make_record("ck", 0.2, class_name="c1", subclass="s1"),
            make_record("ck", 0.4, class_name="c1", subclass="s2"),
            make_record("ck", 0.9, class_name="c2"),
        ]
        out = mt.aggregate_scores(records)
        assert len(out) == 1
        assert out[0].value == pytest.approx(0.6)
        assert out[0].checkpoint == "ck"

    def test_single_class_passthrough(self):
        out = mt.aggregate_scores([make_record("ck", 0.7)])
        assert len(out) == 1
        assert out[0].value == pytest.approx(0.7)

    def test_all_equal_scores(self):
        records = [
            make_record("ck", 0.3, class_name="c1", subclass="s1"),
            make_record("ck", 0.3, class_name="c1", subclass="s2"),
            make_record("ck", 0.3, class_name="c2"),
        ]
        assert mt.aggregate_scores(records)[0].value == pytest.approx(0.3)

    def test_checkpoints_kept_separate(self):
        records = [make_record("a", 0.1), make_record("b", 0.9)]
        out = {c.checkpoint: c.value for c in mt.aggregate_scores(records)}
        assert out == {"a": pytest.approx(0.1), "b": pytest.approx(0.9)}

    def test_missing_label_rejected(self):
        with pytest.raises(ValueError, match="missing"):
            mt.aggregate_scores([make_record("ck", 0.5, category="")])

    def test_mixed_subclass_and_plain_rejected(self):
        records = [
            make_record("ck", 0.2, class_name="c1", subclass="s1"),
            make_record("ck", 0.4, class_name="c1"),
        ]
        with pytest.raises(ValueError, match="mixes"):
            mt.aggregate_scores(records)

    def test_duplicate_plain_records_rejected(self):
        records = [make_record("ck", 0.2), make_record("ck", 0.4)]
        with pytest.raises(ValueError, match="duplicate"):
            mt.aggregate_scores(records)

    def test_duplicate_subclasses_rejected(self):
        records = [
            make_record("ck", 0.2, class_name="c1", subclass="s1"),
            make_record("ck", 0.4, class_name="c1", subclass="s1"),
        ]
        with pytest.raises(ValueError, match="duplicate subclass"):
            mt.aggregate_scores(records)


class TestBalanceRepeats:
    def test_toy_sizes(self):
        assert mt.balance_repeats([12, 10, 7]) == [17, 20, 29]

    def test_scene_sizes(self):
        assert mt.balance_repeats([5, 4, 9]) == [40, 50, 22]

    def test_full_size_class(self):
        assert mt.balance_repeats([200]) == [1]

    def test_minimum_is_one(self):
        assert mt.balance_repeats([500]) == [1]

    def test_half_rounds_up(self):
        # 200 / 80 = 2.5: away from zero means 3
        assert mt.balance_repeats([80]) == [3]

    def test_custom_target(self):
        assert mt.balance_repeats([10], target=35) == [4]

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError, match="positive integers"):
            mt.balance_repeats([0])
        with pytest.raises(ValueError, match="positive integers"):
            mt.balance_repeats([2.5])

    def test_rejects_bad_target(self):
        with pytest.raises(ValueError, match="target"):
            mt.balance_repeats([5], target=0)

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="at least one"):
            mt.balance_repeats([])
