import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from topoattn.analysis import (
    correlation_matrix,
    decode,
    distance_scales,
    pca,
    permutation_null,
    pls_svd_align,
    ridge_encode,
    ridge_fit,
    ridge_loo_errors,
    selectivity,
    spearman,
    student_t_sf2,
    topo_stat,
    topo_stat_profile,
    welch_t,
)
from topoattn.errors import ConfigError, ShapeMismatch, SingleClassSplit, TooFewPairs
from topoattn.grid import make_grid


# ---------------------------------------------------------------------------
# independent reference implementations
# ---------------------------------------------------------------------------

def brute_ranks(v):
    """Average ranks (1-based) by explicit tie grouping."""
    v = list(v)
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def brute_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def brute_spearman(x, y):
    return brute_pearson(brute_ranks(x), brute_ranks(y))


def brute_topo(x, dist, d_max=None):
    n_units = x.shape[1]
    cols = [list(x[:, i]) for i in range(n_units)]
    neg_r, dd = [], []
    for i in range(n_units):
        for j in range(i + 1, n_units):
            if d_max is not None and not dist[i, j] <= d_max + 1e-9:
                continue
            neg_r.append(-brute_pearson(cols[i], cols[j]))
            dd.append(dist[i, j])
    return brute_spearman(neg_r, dd)


def t_density(x, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def quad_two_tailed(t, df):
    tail, _ = integrate.quad(t_density, abs(t), np.inf, args=(df,), epsabs=1e-14, epsrel=1e-12)
    return 2 * tail


def brute_loo(x, y, lam):
    n = x.shape[0]
    out = np.empty(n)
    for i in range(n):
        keep = np.arange(n) != i
        xs, ys = x[keep], y[keep]
        mx, my = xs.mean(axis=0), ys.mean()
        xc = xs - mx
        w = np.linalg.solve(xc.T @ xc + lam * np.eye(x.shape[1]), xc.T @ (ys - my))
        out[i] = y[i] - (my + (x[i] - mx) @ w)
    return out


# ---------------------------------------------------------------------------
# elementary statistics
# ---------------------------------------------------------------------------

class TestSpearman:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.integers(0, 5, size=30).astype(float)
        y = rng.integers(0, 4, size=30) + 0.5 * x
        assert spearman(x, y) == pytest.approx(brute_spearman(x, y), abs=1e-12)

    def test_monotone_is_one(self):
        x = np.linspace(0, 1, 20)
        assert spearman(x, np.exp(x)) == pytest.approx(1.0, abs=1e-15)
        assert spearman(x, -x ** 3) == pytest.approx(-1.0, abs=1e-15)

    def test_constant_is_nan(self):
        assert math.isnan(spearman(np.ones(5), np.arange(5)))


class TestWelch:
    @pytest.mark.parametrize("t,df", [(2.0, 10.0), (3.5, 7.3), (1.0, 1.0), (-0.4, 25.5), (6.0, 40.0), (0.0, 3.0)])
    def test_p_matches_quadrature(self, t, df):
        assert float(student_t_sf2(t, df)) == pytest.approx(quad_two_tailed(t, df), abs=1e-6)

    def test_tabulated_value(self):
        # two-tailed critical value of t at df=10, alpha=0.05
        assert float(student_t_sf2(2.228138851986, 10)) == pytest.approx(0.05, abs=1e-9)

    def test_statistic_matches_formula(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0.3, 1.0, size=(12, 1))
        b = rng.normal(0.0, 2.0, size=(20, 1))
        t, df, p, deg = welch_t(a, b)
        va, vb = a.var(ddof=1) / 12, b.var(ddof=1) / 20
        assert t[0] == pytest.approx((a.mean() - b.mean()) / math.sqrt(va + vb), rel=1e-12)
        assert df[0] == pytest.approx((va + vb) ** 2 / (va ** 2 / 11 + vb ** 2 / 19), rel=1e-12)
        assert p[0] == pytest.approx(quad_two_tailed(t[0], df[0]), abs=1e-6)
        assert not deg[0]


class TestRidgeLoo:
    @pytest.mark.parametrize("lam", [1e-3, 0.1, 1.0, 50.0])
    def test_matches_refitting(self, lam):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 5))
        y = x @ rng.normal(size=5) + 0.3 * rng.normal(size=30) + 2.0
        fast = ridge_loo_errors(x, y, [lam])[0]
        np.testing.assert_allclose(fast, brute_loo(x, y, lam), atol=1e-8, rtol=0)

    def test_fit_intercept_unpenalised(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(40, 3))
        w, b = ridge_fit(x, np.full(40, 7.0), 1e3)
        np.testing.assert_allclose(w, 0.0, atol=1e-12)
        assert b == pytest.approx(7.0)

    def test_noiseless_target(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(200, 8))
        res = ridge_encode(x, x @ rng.normal(size=8), lambdas=[1e-6, 1e-3])
        assert res.correlation > 0.999

    def test_independent_target(self):
        rng = np.random.default_rng(4)
        res = ridge_encode(rng.normal(size=(500, 10)), rng.normal(size=500))
        assert abs(res.correlation) < 0.2

    def test_bad_lambda(self):
        with pytest.raises(ConfigError):
            ridge_encode(np.ones((20, 2)), np.arange(20.0), lambdas=[0.0])


# ---------------------------------------------------------------------------
# selectivity
# ---------------------------------------------------------------------------

class TestSelectivity:
    def test_identical_samples_zero(self):
        a = np.random.default_rng(0).normal(size=(10, 6))
        sel = selectivity(a, a.copy())
        np.testing.assert_array_equal(sel.s, 0.0)
        np.testing.assert_array_equal(sel.t, 0.0)

    def test_antisymmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(15, 9)), rng.normal(0.4, 1.3, size=(11, 9))
        np.testing.assert_array_equal(selectivity(a, b).s, -selectivity(b, a).s)

    def test_p_001_gives_two(self):
        # build samples whose Welch p is exactly 0.01 by placing the mean gap at the critical t
        n = 10
        base = np.random.default_rng(2).normal(size=n)
        base = (base - base.mean()) / base.std(ddof=1)
        df_guess = 2 * n - 2  # equal variances and sizes give df = 2n - 2
        t_crit = special.stdtrit(df_guess, 1 - 0.005)
        gap = t_crit * math.sqrt(2 / n)
        sel = selectivity((base + gap)[:, None], base[:, None])
        assert sel.p[0] == pytest.approx(0.01, rel=1e-9)
        assert sel.s[0] == pytest.approx(2.0, abs=1e-8)

    def test_planted_unit_large(self):
        rng = np.random.default_rng(3)
        a = rng.normal(0.0, 0.1, size=(38, 4))
        b = rng.normal(0.0, 0.1, size=(38, 4))
        a[:, 2] += 1.0
        s = selectivity(a, b).s
        assert s[2] > 10
        b2 = b.copy()
        b2[:, 1] += 1.0
        assert selectivity(a, b2).s[1] < -10

    def test_calibration(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(30, 100))
        b = rng.normal(size=(30, 100))
        a[:, :20] += 1.5
        sel = selectivity(a, b)
        np.testing.assert_array_equal(np.abs(sel.s) >= 2, sel.p <= 0.01)
        assert (sel.s[:20] >= 2).all()

    def test_degenerate_unit(self):
        a = np.zeros((5, 2))
        b = np.zeros((5, 2))
        a[:, 1] = [1, 2, 3, 4, 5]
        sel = selectivity(a, b)
        assert sel.degenerate.tolist() == [True, False]
        assert sel.s[0] == 0.0

    def test_huge_effect_finite(self):
        a = np.array([[1e6], [1e6 + 1e-3], [1e6 - 1e-3]])
        b = np.array([[0.0], [1e-3], [-1e-3]])
        assert np.isfinite(selectivity(a, b).s).all()

    def test_width_mismatch(self):
        with pytest.raises(ShapeMismatch):
            selectivity(np.ones((3, 2)), np.ones((3, 3)))


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

class TestPCA:
    def test_rank_one(self):
        rng = np.random.default_rng(0)
        v = np.array([1.0, -2.0, 0.5, 3.0])
        x = rng.normal(size=(40, 1)) * v + 5.0
        res = pca(x, 1)
        np.testing.assert_allclose(np.abs(res.weights[:, 0]), np.abs(v) / np.linalg.norm(v), atol=1e-12)
        assert res.weights[3, 0] > 0  # largest-magnitude entry made positive
        assert res.explained_variance_ratio[0] == pytest.approx(1.0)

    def test_scores_uncorrelated_and_reconstruct(self):
        x = np.random.default_rng(1).normal(size=(50, 16))
        res = pca(x, 16)
        g = res.scores.T @ res.scores
        np.testing.assert_allclose(g - np.diag(np.diag(g)), 0.0, atol=1e-8)
        np.testing.assert_allclose(res.scores @ res.weights.T, x - x.mean(axis=0), atol=1e-8)
        assert np.all(np.diff(np.diag(g)) <= 1e-9)

    @given(seed=st.integers(0, 10_000), n=st.integers(5, 30), d=st.integers(2, 12))
    @settings(max_examples=40, deadline=None)
    def test_orthonormal_weights(self, seed, n, d):
        x = np.random.default_rng(seed).normal(size=(n, d))
        k = min(n - 1, d)
        res = pca(x, k)
        np.testing.assert_allclose(res.weights.T @ res.weights, np.eye(res.weights.shape[1]), atol=1e-10)
        assert res.explained_variance_ratio.sum() <= 1 + 1e-12

    def test_rank_deficient_warns(self):
        x = np.random.default_rng(2).normal(size=(30, 2)) @ np.ones((2, 6))
        with pytest.warns(RuntimeWarning):
            res = pca(x, 5)
        assert res.weights.shape[1] == 1

    def test_k_out_of_range(self):
        with pytest.raises(ConfigError):
            pca(np.ones((4, 10)), 4)


# ---------------------------------------------------------------------------
# topography
# ---------------------------------------------------------------------------

def smooth_responses(grid, n=60, seed=0, length=1.5):
    """Responses with correlation decaying in grid distance (Gaussian-process sample)."""
    rng = np.random.default_rng(seed)
    cov = np.exp(-(grid.distances / length) ** 2) + 1e-9 * np.eye(grid.d)
    return rng.normal(size=(n, grid.d)) @ np.linalg.cholesky(cov).T


class TestTopoStat:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_brute_force(self, seed):
        g = make_grid(16)
        x = smooth_responses(g, 25, seed)
        assert topo_stat(x, g.distances) == pytest.approx(brute_topo(x, g.distances), abs=1e-12)
        assert topo_stat(x, g.distances, 2.5) == pytest.approx(brute_topo(x, g.distances, 2.5), abs=1e-12)

    def test_block_smooth_toy(self):
        g = make_grid(16)
        rng = np.random.default_rng(9)
        latent = rng.normal(size=(20, 4))
        block = (g.coords[:, 0] // 2) * 2 + g.coords[:, 1] // 2
        x = latent[:, block] + 0.3 * rng.normal(size=(20, 16))
        assert topo_stat(x, g.distances) == pytest.approx(brute_topo(x, g.distances), abs=1e-12)

    def test_exact_exponential_correlation(self):
        # activations constructed so corr(i, j) = exp(-dist(i, j)) exactly
        g = make_grid(9)
        target = np.exp(-g.distances)
        l = np.linalg.cholesky(target)
        n = 9
        z = np.linalg.qr(np.random.default_rng(0).normal(size=(n + 1, n)))[0]
        z = z - z.mean(axis=0)
        z, _ = np.linalg.qr(z)
        x = z @ l.T
        r, _ = correlation_matrix(x)
        np.testing.assert_allclose(r, target, atol=1e-10)
        assert topo_stat(x, g.distances) == pytest.approx(1.0, abs=1e-12)

    def test_affine_invariance(self):
        g = make_grid(25)
        rng = np.random.default_rng(1)
        x = smooth_responses(g, 40, 1)
        y = x * rng.uniform(0.1, 10, size=25) + rng.normal(size=25) * 100
        assert topo_stat(y, g.distances) == pytest.approx(topo_stat(x, g.distances), abs=1e-10)

    def test_relabel_invariance(self):
        g = make_grid(25)
        x = smooth_responses(g, 40, 2)
        perm = np.random.default_rng(2).permutation(25)
        d = g.distances
        assert topo_stat(x[:, perm], d[np.ix_(perm, perm)]) == pytest.approx(topo_stat(x, d), abs=1e-12)

    def test_constant_units_excluded(self):
        g = make_grid(16)
        x = smooth_responses(g, 30, 3)
        x[:, 5] = 2.0
        res = topo_stat_profile(x, g.distances)
        assert res.excluded_units == 1
        keep = np.arange(16) != 5
        expected = brute_topo(x[:, keep], g.distances[np.ix_(keep, keep)])
        assert topo_stat(x, g.distances) == pytest.approx(expected, abs=1e-12)

    def test_single_distance_scale_flagged(self):
        # on a 4x4 grid the lowest scale is 1.0, which only admits neighbour pairs
        g = make_grid(16)
        res = topo_stat_profile(smooth_responses(g, 30, 5), g.distances)
        assert np.isnan(res.values[0])
        assert res.mean == pytest.approx(np.nanmean(res.values))

    def test_constant_matrix_rejected(self):
        g = make_grid(16)
        with pytest.raises(TooFewPairs):
            topo_stat_profile(np.ones((10, 16)), g.distances)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            topo_stat(np.ones((5, 4)), make_grid(9).distances)


class TestProfile:
    def test_scale_endpoints(self):
        g = make_grid(64)
        nz = sorted(g.distances[i, j] for i in range(64) for j in range(i + 1, 64))
        # linear-interpolation percentile by hand
        pos = 0.10 * (len(nz) - 1)
        lo = nz[int(math.floor(pos))] + (pos - math.floor(pos)) * (nz[int(math.ceil(pos))] - nz[int(math.floor(pos))])
        scales = distance_scales(g.distances)
        assert scales.size == 9
        assert scales[0] == pytest.approx(lo, abs=1e-12)
        assert scales[-1] == pytest.approx(nz[-1], abs=1e-12)
        np.testing.assert_allclose(np.diff(scales), np.diff(scales)[0], atol=1e-12)

    def test_values_bounded_and_mean(self):
        g = make_grid(36)
        res = topo_stat_profile(smooth_responses(g, 50, 4), g.distances)
        assert res.values.shape == (9,)
        assert np.isfinite(res.values).all()
        assert np.all(np.abs(res.values) <= 1)
        assert res.mean == pytest.approx(res.values.mean())
        for d_max, v in zip(res.scales, res.values):
            assert v == pytest.approx(topo_stat(smooth_responses(g, 50, 4), g.distances, d_max), abs=1e-12)


class TestPermutationNull:
    def test_smooth_significant(self):
        g = make_grid(36)
        res = permutation_null(smooth_responses(g, 80, 5), g.distances, n_perm=100, seed=0)
        assert res.null.shape == (100,)
        assert res.significant
        assert res.percentile == 100.0

    def test_null_centred_on_random_positions(self):
        g = make_grid(36)
        x = smooth_responses(g, 80, 6)
        rng = np.random.default_rng(6)
        vals = []
        for _ in range(100):
            p = rng.permutation(36)
            vals.append(topo_stat(x, g.distances[np.ix_(p, p)]))
        vals = np.array(vals)
        assert abs(vals.mean()) < 2 * vals.std()

    def test_identity_permutation(self):
        g = make_grid(16)
        x = smooth_responses(g, 30, 7)
        ident = np.arange(16)
        assert topo_stat(x, g.distances[np.ix_(ident, ident)]) == topo_stat(x, g.distances)

    def test_seeded(self):
        g = make_grid(16)
        x = np.random.default_rng(8).normal(size=(30, 16))
        a = permutation_null(x, g.distances, 20, seed=3)
        b = permutation_null(x, g.distances, 20, seed=3)
        assert a.null.tobytes() == b.null.tobytes()

    def test_all_pairs_mode(self):
        g = make_grid(16)
        x = smooth_responses(g, 30, 9)
        res = permutation_null(x, g.distances, 20, seed=0, profile=False)
        assert res.mean == pytest.approx(topo_stat(x, g.distances))

    def test_too_few_permutations(self):
        with pytest.raises(ConfigError):
            permutation_null(np.ones((4, 4)), make_grid(4).distances, n_perm=10)


# ---------------------------------------------------------------------------
# decoding and alignment
# ---------------------------------------------------------------------------

class TestDecode:
    def test_separable(self):
        rng = np.random.default_rng(0)
        y = np.repeat([0, 1], 100)
        x = rng.normal(size=(200, 30))
        x[:, 3] += 6 * (y - 0.5)
        assert decode(x, y, n_components=10).accuracy == 1.0

    def test_shuffled_chance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(200, 60))
        y = rng.permutation(np.repeat([0, 1], 100))
        assert abs(decode(x, y).accuracy - 0.5) <= 0.15

    def test_truncation_warns(self):
        rng = np.random.default_rng(2)
        y = np.repeat([0, 1], 10)
        x = rng.normal(size=(20, 5)) + y[:, None]
        with pytest.warns(RuntimeWarning):
            res = decode(x, y, n_components=50)
        assert res.n_components == 5

    def test_single_class(self):
        with pytest.raises(SingleClassSplit):
            decode(np.random.default_rng(3).normal(size=(20, 4)), np.zeros(20))


class TestAlignment:
    def test_self(self):
        x = np.random.default_rng(0).normal(size=(200, 12))
        res = pls_svd_align(x, x.copy(), n_components=10)
        assert (res.correlations >= 0.99).all()
        np.testing.assert_allclose(np.linalg.norm(res.weights_x, axis=0), 1.0, atol=1e-12)

    def test_rotation(self):
        rng = np.random.default_rng(1)
        latent = rng.normal(size=(500, 3)) * [5.0, 4.0, 3.0]
        x = latent @ rng.normal(size=(3, 20)) + 0.5 * rng.normal(size=(500, 20))
        q, _ = np.linalg.qr(rng.normal(size=(20, 20)))
        res = pls_svd_align(x, x @ q, n_components=3)
        assert (res.correlations > 0.9).all()

    def test_independent(self):
        rng = np.random.default_rng(2)
        res = pls_svd_align(rng.normal(size=(500, 15)), rng.normal(size=(500, 10)))
        assert (np.abs(res.correlations) < 0.2).all()

    def test_independent_centred_across_seeds(self):
        # each held-out r has sd ~ 1/sqrt(100); averaged over seeds it must sit on 0
        rng = np.random.default_rng(5)
        means = [pls_svd_align(rng.normal(size=(500, 15)), rng.normal(size=(500, 10)), seed=s).correlations.mean()
                 for s in range(30)]
        assert abs(np.mean(means)) < 0.03

    def test_bitwise_repeatable(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(100, 8)), rng.normal(size=(100, 6))
        a, b = pls_svd_align(x, y, 4, seed=5), pls_svd_align(x, y, 4, seed=5)
        assert a.correlations.tobytes() == b.correlations.tobytes()
        assert a.weights_y.tobytes() == b.weights_y.tobytes()

    def test_zero_variance_column_dropped(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(100, 6))
        y = x.copy()
        y[:, 2] = 1.0
        res = pls_svd_align(x, y, 3)
        assert res.kept_y.tolist() == [True, True, False, True, True, True]
        assert res.full_weights_y().shape == (6, 3)
        assert (res.full_weights_y()[2] == 0).all()

    def test_row_mismatch(self):
        with pytest.raises(ShapeMismatch):
            pls_svd_align(np.ones((10, 2)), np.ones((11, 2)))
