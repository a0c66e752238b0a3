"""Hash family determinism, bucket mechanics, and collision kernels."""

import numpy as np
import pytest

from datacull.lsh import (
    COSINE_SIGNED_PROJECTION,
    EUCLIDEAN_PSTABLE,
    HashFamily,
    HashFamilySpec,
    collision_probability,
    family_new,
    kernel_values,
    median_pairwise_distance,
)


def euclidean_spec(dim=8, rows=32, buckets=64, bandwidth=1.0, seed=11):
    return HashFamilySpec(
        kind=EUCLIDEAN_PSTABLE, dim=dim, rows=rows, buckets=buckets,
        bandwidth=bandwidth, seed=seed,
    )


def cosine_spec(dim=8, rows=32, buckets=64, seed=11):
    return HashFamilySpec(
        kind=COSINE_SIGNED_PROJECTION, dim=dim, rows=rows, buckets=buckets, seed=seed
    )


class TestSpecValidation:
    def test_zero_dimension_rejected(self):
        with pytest.raises(ValueError, match="dimension"):
            euclidean_spec(dim=0)

    def test_zero_bucket_range_rejected(self):
        with pytest.raises(ValueError, match="bucket range"):
            euclidean_spec(buckets=0)

    def test_nonpositive_bandwidth_rejected(self):
        with pytest.raises(ValueError, match="bandwidth"):
            euclidean_spec(bandwidth=0.0)
        with pytest.raises(ValueError, match="bandwidth"):
            euclidean_spec(bandwidth=-2.0)

    def test_bandwidth_meaningless_for_cosine(self):
        with pytest.raises(ValueError, match="bandwidth"):
            HashFamilySpec(
                kind=COSINE_SIGNED_PROJECTION, dim=4, rows=2, buckets=8, bandwidth=1.0
            )

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            HashFamilySpec(kind="minhash", dim=4, rows=2, buckets=8)


class TestDeterminism:
    @pytest.mark.parametrize("spec_fn", [euclidean_spec, cosine_spec])
    def test_same_spec_gives_identical_buckets(self, spec_fn):
        spec = spec_fn()
        f1, f2 = family_new(spec), family_new(spec)
        rng = np.random.default_rng(0)
        probes = rng.standard_normal((20, spec.dim))
        np.testing.assert_array_equal(f1.bucket_matrix(probes), f2.bucket_matrix(probes))

    def test_different_seeds_rarely_agree_fully(self):
        f1 = family_new(euclidean_spec(seed=1))
        f2 = family_new(euclidean_spec(seed=2))
        rng = np.random.default_rng(0)
        probes = rng.standard_normal((100, 8))
        b1, b2 = f1.bucket_matrix(probes), f2.bucket_matrix(probes)
        full_agreement = np.all(b1 == b2, axis=1).mean()
        assert full_agreement < 0.05

    def test_hash_row_is_pure(self):
        fam = family_new(euclidean_spec())
        x = np.arange(8, dtype=float)
        assert fam.hash_row(3, x) == fam.hash_row(3, x)

    def test_rows_differ_from_each_other(self):
        fam = family_new(euclidean_spec(rows=64))
        rng = np.random.default_rng(5)
        probes = rng.standard_normal((50, 8))
        buckets = fam.bucket_matrix(probes)
        # any two distinct rows should disagree on most probes
        assert (buckets[:, 0] == buckets[:, 1]).mean() < 0.9


class TestBucketMechanics:
    def test_zero_vector_lands_in_bucket_zero(self):
        # projections of the origin are 0, offsets lie in [0, bandwidth),
        # so floor((0 + b)/bandwidth) = 0 for every row.
        fam = family_new(euclidean_spec(rows=16))
        buckets = fam.bucket_matrix(np.zeros(8))
        np.testing.assert_array_equal(buckets, np.zeros((1, 16), dtype=np.int64))

    def test_buckets_within_range(self):
        for spec in (euclidean_spec(buckets=7), cosine_spec(buckets=7)):
            fam = family_new(spec)
            rng = np.random.default_rng(2)
            buckets = fam.bucket_matrix(rng.standard_normal((200, 8)) * 10)
            assert buckets.min() >= 0
            assert buckets.max() < 7

    def test_translation_along_projection_shifts_index_by_one(self):
        spec = euclidean_spec(bandwidth=0.75)
        fam = family_new(spec)
        rng = np.random.default_rng(9)
        x = rng.standard_normal(8)
        for row in range(5):
            w = fam.projections[row]
            shifted = x + spec.bandwidth * w / (w @ w)
            assert fam.raw_index(row, shifted) == fam.raw_index(row, x) + 1

    def test_hash_row_matches_premodulo_index(self):
        spec = euclidean_spec(buckets=13)
        fam = family_new(spec)
        rng = np.random.default_rng(10)
        for x in rng.standard_normal((10, 8)):
            for row in (0, 7, 31):
                assert fam.hash_row(row, x) == fam.raw_index(row, x) % 13

    def test_dimension_mismatch_rejected(self):
        fam = family_new(euclidean_spec(dim=8))
        with pytest.raises(ValueError, match="dimension"):
            fam.bucket_matrix(np.zeros(5))

    def test_row_out_of_range_rejected(self):
        fam = family_new(euclidean_spec(rows=4))
        with pytest.raises(ValueError, match="out of range"):
            fam.hash_row(4, np.zeros(8))


class TestCollisionProbability:
    @pytest.mark.parametrize("spec_fn", [euclidean_spec, cosine_spec])
    def test_identical_points_collide_surely(self, spec_fn):
        spec = spec_fn()
        x = np.arange(8, dtype=float) + 1
        assert collision_probability(spec, x, x) == 1.0

    def test_far_points_almost_never_collide(self):
        spec = euclidean_spec(bandwidth=1.0)
        x = np.zeros(8)
        y = np.zeros(8)
        y[0] = 100.0
        assert collision_probability(spec, x, y) < 0.01

    def test_monotone_nonincreasing_in_distance(self):
        spec = euclidean_spec(bandwidth=2.0)
        x = np.zeros(8)
        probs = []
        for dist in np.linspace(0, 10, 40):
            y = np.zeros(8)
            y[0] = dist
            probs.append(collision_probability(spec, x, y))
        assert all(a >= b for a, b in zip(probs, probs[1:]))

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        x, y = rng.standard_normal(8), rng.standard_normal(8)
        for spec in (euclidean_spec(), cosine_spec()):
            assert collision_probability(spec, x, y) == collision_probability(spec, y, x)

    def test_shift_invariance_euclidean(self):
        spec = euclidean_spec()
        rng = np.random.default_rng(4)
        x, y, t = rng.standard_normal((3, 8))
        p1 = collision_probability(spec, x, y)
        p2 = collision_probability(spec, x + t, y + t)
        assert p1 == pytest.approx(p2, abs=1e-12)

    def test_empirical_collision_rate_matches_formula_euclidean(self):
        # 20k independent rows give a +/-0.02 Monte Carlo check.
        bandwidth = 1.5
        spec = HashFamilySpec(
            kind=EUCLIDEAN_PSTABLE, dim=6, rows=20000, buckets=20000,
            bandwidth=bandwidth, seed=21,
        )
        fam = family_new(spec)
        rng = np.random.default_rng(5)
        x = rng.standard_normal(6)
        direction = rng.standard_normal(6)
        direction /= np.linalg.norm(direction)
        y = x + bandwidth * direction
        collisions = (fam.bucket_matrix(x)[0] == fam.bucket_matrix(y)[0]).mean()
        assert collisions == pytest.approx(collision_probability(spec, x, y), abs=0.02)

    def test_empirical_collision_rate_matches_formula_cosine(self):
        # power-of-two bucket count so the modulo step aliases nothing
        spec = HashFamilySpec(
            kind=COSINE_SIGNED_PROJECTION, dim=6, rows=20000, buckets=16, seed=22
        )
        fam = family_new(spec)
        rng = np.random.default_rng(6)
        x = rng.standard_normal(6)
        y = rng.standard_normal(6)
        collisions = (fam.bucket_matrix(x)[0] == fam.bucket_matrix(y)[0]).mean()
        assert collisions == pytest.approx(collision_probability(spec, x, y), abs=0.02)

    def test_kernel_values_vectorizes_pairwise_formula(self):
        spec = euclidean_spec(bandwidth=0.8)
        rng = np.random.default_rng(7)
        data = rng.standard_normal((30, 8))
        y = rng.standard_normal(8)
        batch = kernel_values(spec, data, y)
        single = [collision_probability(spec, row, y) for row in data]
        np.testing.assert_allclose(batch, single, atol=1e-14)

    def test_zero_vector_rejected_for_cosine(self):
        spec = cosine_spec()
        with pytest.raises(ValueError, match="zero vector"):
            collision_probability(spec, np.zeros(8), np.ones(8))


class TestMedianBandwidth:
    def test_small_fixture_median(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        # pairwise distances 1, 1, sqrt(2) -> median 1
        assert median_pairwise_distance(pts) == 1.0

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(8)
        pts = rng.standard_normal((3000, 4))
        a = median_pairwise_distance(pts, sample_size=500, seed=1)
        b = median_pairwise_distance(pts, sample_size=500, seed=1)
        assert a == b

    def test_needs_spread(self):
        with pytest.raises(ValueError, match="spread"):
            median_pairwise_distance(np.zeros((10, 3)))

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            median_pairwise_distance(np.zeros((1, 3)))
