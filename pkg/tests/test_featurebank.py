import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from dvd import diffcore as dc
from dvd import featurebank as fb
from dvd.databench import FeatureDataset
from dvd.errors import DegenerateFeatureError, EmptyInputError, ParameterError

nonzero_vec = hnp.arrays(np.float64, 4, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_build_bank_counts_and_round_trip():
    x = np.array([[1, 2], [3, 4], [5, 6]], np.float32)
    bank = fb.build_bank(FeatureDataset(x), "source")
    assert bank.count == 3 and bank.dim == 2 and bank.generation == 0
    np.testing.assert_array_equal(bank.dump(), x)


def test_build_bank_rejects_zero_vector():
    with pytest.raises(DegenerateFeatureError):
        fb.build_bank(np.array([[1.0, 0.0], [0.0, 0.0]]), "target")


def test_build_bank_rejects_empty():
    with pytest.raises(EmptyInputError):
        fb.build_bank(np.zeros((0, 2)), "target")


def test_bank_is_read_only():
    bank = fb.FeatureBank(np.ones((2, 2)), "source")
    with pytest.raises(ValueError):
        bank.entries[0, 0] = 5


def test_refresh_with_identity_encoder():
    x = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    ident = dc.MlpNet([dc.Layer(np.eye(3, dtype=np.float32), np.zeros((1, 3), np.float32))])
    bank = fb.build_bank(x, "target")
    once = fb.refresh_bank(bank, ident, x)
    twice = fb.refresh_bank(once, ident, x)
    np.testing.assert_array_equal(once.entries, x)
    np.testing.assert_array_equal(twice.entries, once.entries)
    assert twice.generation == bank.generation + 2


@pytest.mark.parametrize(
    "a,b,expected", [([1, 0], [1, 0], 1.0), ([1, 0], [0, 1], 0.0), ([1, 1], [1, 0], 0.70710678)]
)
def test_cosine_examples(a, b, expected):
    assert fb.cosine_sim(a, b) == pytest.approx(expected, abs=1e-8)


def test_cosine_rejects_zero():
    with pytest.raises(DegenerateFeatureError):
        fb.cosine_sim([0, 0], [1, 0])


@given(nonzero_vec, nonzero_vec, st.floats(1e-3, 1e3))
def test_cosine_symmetric_scale_invariant_bounded(a, b, c):
    s = fb.cosine_sim(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(fb.cosine_sim(b, a), abs=1e-12)
    assert s == pytest.approx(fb.cosine_sim(c * a, b), abs=1e-6)


def test_knn_small_example():
    bank = fb.FeatureBank([[1, 0], [0, 1], [-1, 0]], "source")
    assert list(fb.knn(bank, [1, 0.1], 1)) == [0]
    assert list(fb.knn(bank, [1, 0.1], 3)) == [0, 1, 2]


def test_knn_ties_break_by_index():
    bank = fb.FeatureBank([[1, 1], [2, 2], [1, 0], [3, 3]], "source")
    assert list(fb.knn(bank, [1, 1], 3)) == [0, 1, 3]


@pytest.mark.parametrize("k", [0, 4])
def test_knn_k_out_of_range(k):
    bank = fb.FeatureBank([[1, 0], [0, 1], [-1, 0]], "source")
    with pytest.raises(ParameterError):
        fb.knn(bank, [1, 0], k, exclude=0 if k == 4 else None)


@pytest.mark.parametrize("seed", range(10))
def test_knn_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    n, d = [(20, 8), (200, 16), (1000, 64)][seed % 3]
    bank = fb.FeatureBank(rng.standard_normal((n, d)), "source")
    for _ in range(3):
        q = rng.standard_normal(d)
        k = int(rng.integers(1, min(n, 30)))
        ref = oracles.knn(bank.entries, q, k)
        assert list(fb.knn(bank, q, k)) == ref
        assert list(fb.knn_batch(bank, q[None], k)[0]) == ref


@given(st.integers(0, 2**31), st.integers(1, 10))
def test_self_exclusion(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((12, 3))
    bank = fb.FeatureBank(x, "source")
    i = int(rng.integers(12))
    got = fb.knn(bank, x[i], k, exclude=i)
    assert i not in got and len(set(got)) == k
    assert list(got) == oracles.knn(bank.entries, x[i], k, exclude=i)
    batch = fb.knn_batch(bank, x, k, exclude=np.arange(12))
    assert all(j not in row for j, row in enumerate(batch))


@pytest.mark.parametrize(
    "nbrs,mu,var",
    [([[1], [3]], [2], [1]), ([[5, 5], [5, 5]], [5, 5], [0, 0]), ([[0, 0], [2, 0], [4, 0]], [2, 0], [8 / 3, 0])],
)
def test_moment_examples(nbrs, mu, var):
    m, v = fb.vicinity_moments(nbrs)
    np.testing.assert_allclose(m, mu)
    np.testing.assert_allclose(v, var)


def test_identical_neighbours_give_exact_zero_variance():
    bank = fb.FeatureBank([[0.3, 0.7]] * 4 + [[-1, 0]], "target")
    prior = fb.vicinity_prior(bank, [0.3, 0.7], 4)
    assert not prior.var.any()


@pytest.mark.parametrize("seed", range(10))
def test_prior_moments_match_two_pass_oracle(seed):
    rng = np.random.default_rng(seed)
    bank = fb.FeatureBank(rng.standard_normal((300, 32)), "source")
    q = rng.standard_normal(32)
    prior = fb.vicinity_prior(bank, q, 15)
    mu, var = oracles.moments(bank.entries[oracles.knn(bank.entries, q, 15)])
    np.testing.assert_allclose(prior.mean, mu, atol=1e-6)
    np.testing.assert_allclose(prior.var, var, atol=1e-6)


def test_sample_prior_degenerate_returns_mean():
    prior = fb.VicinityPrior(np.array([1.5, -2.0]), np.zeros(2), 3)
    np.testing.assert_array_equal(fb.sample_prior(prior, np.random.default_rng(0)), np.float32([1.5, -2.0]))


def test_sample_prior_seeded():
    prior = fb.VicinityPrior(np.zeros(3), np.ones(3), 3)
    a = fb.sample_prior(prior, np.random.default_rng(9))
    b = fb.sample_prior(prior, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_sample_prior_monte_carlo_moments():
    prior = fb.VicinityPrior(np.zeros((100_000, 1)), np.full((100_000, 1), 4.0), 3)
    s = fb.sample_prior(prior, np.random.default_rng(0)).astype(np.float64)
    assert abs(s.mean()) < 0.05
    assert abs(s.var() - 4.0) < 0.1


def test_prior_rejects_negative_variance():
    with pytest.raises(ParameterError):
        fb.VicinityPrior(np.zeros(2), np.array([1.0, -1.0]), 2)
