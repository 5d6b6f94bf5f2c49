import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats as sps

from sslmark import stats


# ----------------------------------------------------------------- oracles

def naive_swd(X, Y, directions):
    """Project, sort and compare with plain Python loops."""
    n = len(X)
    per_dir = []
    for u in directions:
        px = sorted(sum(float(x[k]) * float(u[k]) for k in range(len(u))) for x in X)
        py = sorted(sum(float(y[k]) * float(u[k]) for k in range(len(u))) for y in Y)
        per_dir.append(math.sqrt(sum((a - b) ** 2 for a, b in zip(px, py))) / math.sqrt(n))
    return math.sqrt(sum(per_dir) / len(per_dir))


def t_sf_df2(t):
    # closed-form Student-t survival function with 2 degrees of freedom
    return 0.5 - t / (2.0 * math.sqrt(2.0 + t * t))


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# ------------------------------------------------------------------ cosine

def test_cosine_examples():
    assert stats.cosine_similarity([1, 0], [1, 0]) == 1.0
    assert stats.cosine_similarity([1, 0], [0, 1]) == 0.0
    assert stats.cosine_similarity([3, 4], [4, 3]) == pytest.approx(24 / 25, abs=1e-15)


def test_cosine_rejects_zero_and_mismatch():
    with pytest.raises(ValueError):
        stats.cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError):
        stats.cosine_similarity([1, 0, 0], [1, 0])


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_cosine_bounded(a, b):
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        return
    assert abs(stats.cosine_similarity(a, b)) <= 1 + 1e-12


@given(arrays(np.float64, 4, elements=st.floats(0.01, 100)))
def test_cosine_self_is_one(a):
    assert stats.cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)


def test_rowwise_cosine_matches_scalar(rng):
    A, B = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    expect = [stats.cosine_similarity(a, b) for a, b in zip(A, B)]
    np.testing.assert_allclose(stats.rowwise_cosine(A, B), expect, atol=1e-14)


# --------------------------------------------------------------------- SWD

def test_swd_point_masses_unit_distance():
    for seed in range(5):
        P = stats.make_projections(4, 1, seed)
        assert stats.sliced_wasserstein([[0.0]], [[1.0]], P) == pytest.approx(1.0, abs=1e-15)


def test_swd_frozen_values():
    # two axis directions, X = identity rows, Y = origin twice: each direction
    # contributes sqrt(1)/sqrt(2), so the result is 2 ** -0.25
    P = stats.ProjectionSet(np.eye(2), 0)
    assert stats.sliced_wasserstein(np.eye(2), np.zeros((2, 2)), P) == pytest.approx(2 ** -0.25, abs=1e-15)
    # 1-D shift by 2 for both sorted points gives per-direction 2, result sqrt(2)
    P1 = stats.ProjectionSet(np.ones((1, 1)), 0)
    assert stats.sliced_wasserstein([[0.0], [1.0]], [[2.0], [3.0]], P1) == pytest.approx(math.sqrt(2), abs=1e-15)


def test_swd_matches_naive_oracle_8x2():
    g = np.random.default_rng(99)
    X, Y = g.normal(size=(8, 2)), g.normal(size=(8, 2))
    P = stats.make_projections(16, 2, seed=5)
    assert stats.sliced_wasserstein(X, Y, P) == pytest.approx(naive_swd(X, Y, P.directions), abs=1e-6)


@given(st.integers(1, 32), st.integers(1, 16), st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_swd_matches_naive_oracle(n, d, J, seed):
    g = np.random.default_rng(seed)
    X, Y = g.normal(size=(n, d)), 3 * g.normal(size=(n, d)) + 1
    P = stats.make_projections(J, d, seed)
    assert stats.sliced_wasserstein(X, Y, P) == pytest.approx(naive_swd(X, Y, P.directions), abs=1e-6)


@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 10_000))
def test_swd_invariants(n, d, seed):
    g = np.random.default_rng(seed)
    X, Y = g.normal(size=(n, d)), g.normal(size=(n, d))
    P = stats.make_projections(8, d, seed)
    assert stats.sliced_wasserstein(X, X, P) == 0.0
    assert stats.sliced_wasserstein(X, Y, P) == stats.sliced_wasserstein(Y, X, P)
    px, py = g.permutation(n), g.permutation(n)
    assert stats.sliced_wasserstein(X[px], Y[py], P) == stats.sliced_wasserstein(X, Y, P)
    P2 = stats.make_projections(8, d, seed)
    assert stats.sliced_wasserstein(X, Y, P2) == stats.sliced_wasserstein(X, Y, P)


def test_swd_errors():
    P = stats.make_projections(3, 2, 0)
    with pytest.raises(ValueError):
        stats.sliced_wasserstein(np.zeros((0, 2)), np.zeros((0, 2)), P)
    with pytest.raises(ValueError):
        stats.sliced_wasserstein(np.zeros((3, 2)), np.zeros((3, 3)), P)
    with pytest.raises(ValueError):
        stats.sliced_wasserstein(np.zeros((3, 2)), np.zeros((4, 2)), P)
    with pytest.raises(ValueError):
        stats.sliced_wasserstein([[np.nan, 0]], [[0, 0]], P)


def test_projections_unit_rows_and_seeded():
    P = stats.make_projections(32, 7, 3)
    np.testing.assert_allclose(np.linalg.norm(P.directions, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(P.directions, stats.make_projections(32, 7, 3).directions)
    assert (P.J, P.dim) == (32, 7)
    with pytest.raises(ValueError):
        stats.make_projections(0, 3, 0)


def test_equalize_sizes_subsamples_larger():
    X, Y = np.arange(10.0)[:, None], np.arange(4.0)[:, None]
    a, b = stats.equalize_sizes(X, Y, seed=0)
    assert len(a) == len(b) == 4 and set(a.ravel()) <= set(X.ravel())
    c, d = stats.equalize_sizes(Y, X, seed=0)
    np.testing.assert_array_equal(c, Y)
    np.testing.assert_array_equal(d, a)


# ------------------------------------------------------------------ t-test

def test_ttest_reference_example():
    a = np.array([0.9, 0.8, 0.95, 0.85])
    b = np.array([0.1, 0.2, 0.15, 0.05])
    res = stats.paired_t_test_greater(a, b, margin=0.15)
    ref = sps.ttest_rel(a - 0.15, b, alternative="greater")
    assert res.p_value == pytest.approx(ref.pvalue, abs=1e-9)
    assert res.t_statistic == pytest.approx(ref.statistic, rel=1e-12)


def test_ttest_closed_form_df2():
    # d = (1, 2, 3): mean 2, sd 1, t = 2*sqrt(3), two degrees of freedom
    res = stats.paired_t_test_greater([1, 2, 3], [0, 0, 0])
    t = 2 * math.sqrt(3)
    assert res.t_statistic == pytest.approx(t, rel=1e-14)
    assert res.p_value == pytest.approx(t_sf_df2(t), abs=1e-12)
    assert res.p_value == pytest.approx(0.0370900, abs=1e-7)


@given(st.integers(2, 60), st.floats(0, 0.5), st.integers(0, 10_000))
def test_ttest_matches_t_distribution(n, margin, seed):
    g = np.random.default_rng(seed)
    a, b = g.uniform(size=n), g.uniform(size=n) * 0.5
    res = stats.paired_t_test_greater(a, b, margin=margin)
    d = a - b - margin
    t = d.mean() / (d.std(ddof=1) / math.sqrt(n))
    assert res.p_value == pytest.approx(sps.t.sf(t, n - 1), abs=1e-9)
    assert not res.degenerate


def test_ttest_h0_by_construction():
    a = np.linspace(0.2, 0.9, 30)
    assert stats.paired_t_test_greater(a, a, margin=0.15).p_value > 0.99


def test_ttest_degenerate_conventions():
    res = stats.paired_t_test_greater([0.4, 0.4, 0.4], [0.25, 0.25, 0.25], margin=0.15)
    assert res.degenerate and res.p_value == 0.5 and res.t_statistic == 0.0
    above = stats.paired_t_test_greater([0.9] * 5, [0.0] * 5, margin=0.15)
    assert above.degenerate and above.p_value == 0.5
    below = stats.paired_t_test_greater([0.1] * 5, [0.0] * 5, margin=0.15)
    assert below.degenerate and below.p_value == 1.0


def test_ttest_errors():
    with pytest.raises(ValueError):
        stats.paired_t_test_greater([1.0], [0.0])
    with pytest.raises(ValueError):
        stats.paired_t_test_greater([1.0, 2.0], [0.0])


def test_ttest_monotone_in_mean_shift():
    base = np.random.default_rng(3).normal(size=25)
    base = (base - base.mean()) / base.std(ddof=1)
    ps = [stats.paired_t_test_greater(base + m, np.zeros(25)).p_value for m in np.linspace(-2, 2, 41)]
    assert all(x >= y for x, y in zip(ps, ps[1:]))


# ------------------------------------------------------------------ kmeans

def test_kmeans_examples():
    X = np.tile([[1.0, 2.0, 3.0]], (6, 1))
    np.testing.assert_array_equal(stats.kmeans(X, 1).centers[0], X[0])
    g = np.random.default_rng(0)
    Y = g.normal(size=(9, 2))
    res = stats.kmeans(Y, 9, seed=1)
    assert res.objective_history[-1] == pytest.approx(0.0, abs=1e-20)
    assert sorted(map(tuple, res.centers)) == sorted(map(tuple, Y))


def test_kmeans_two_blobs():
    g = np.random.default_rng(1)
    a = g.normal(size=(40, 2)) * 0.3 + [5, 5]
    b = g.normal(size=(40, 2)) * 0.3 - [5, 5]
    res = stats.kmeans(np.vstack([a, b]), 2, seed=0)
    got = sorted(map(tuple, res.centers))
    want = sorted([tuple(a.mean(0)), tuple(b.mean(0))])
    np.testing.assert_allclose(got, want, atol=0.1)


@given(st.integers(5, 60), st.integers(1, 5), st.integers(0, 1000))
def test_kmeans_objective_nonincreasing(n, k, seed):
    X = np.random.default_rng(seed).normal(size=(n, 3))
    h = stats.kmeans(X, min(k, n), seed=seed).objective_history
    assert all(b <= a + 1e-9 * max(a, 1) for a, b in zip(h, h[1:]))


def test_kmeans_seeded_and_validated():
    X = np.random.default_rng(4).normal(size=(30, 4))
    r1, r2 = stats.kmeans(X, 3, seed=7), stats.kmeans(X, 3, seed=7)
    np.testing.assert_array_equal(r1.labels, r2.labels)
    with pytest.raises(ValueError):
        stats.kmeans(X, 31)


# --------------------------------------------------------------------- PCA

def test_pca_line_recovery():
    t = np.linspace(-3, 3, 25)
    X = np.outer(t, [1.0, -2.0, 0.5]) + [1, 1, 1]
    z = stats.pca_project(X, 1)[:, 0]
    assert abs(np.corrcoef(z, t)[0, 1]) == pytest.approx(1.0, abs=1e-12)


def test_pca_isotropic_variances():
    X = np.random.default_rng(8).normal(size=(4000, 2))
    _, _, var = stats.pca_fit(X, 2)
    eig = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1]
    np.testing.assert_allclose(var, eig, rtol=1e-10)
    assert var[1] / var[0] > 0.9


def test_pca_zero_variance():
    np.testing.assert_array_equal(stats.pca_project(np.ones((5, 3)), 2), np.zeros((5, 2)))


@given(st.integers(3, 40), st.integers(2, 6), st.integers(0, 1000))
def test_pca_columns_orthogonal(n, d, seed):
    X = np.random.default_rng(seed).normal(size=(n, d))
    k = min(2, d)
    Z = stats.pca_project(X, k)
    G = Z.T @ Z
    off = G - np.diag(np.diag(G))
    assert np.max(np.abs(off)) <= 1e-8 * max(1.0, np.max(np.abs(G)))
