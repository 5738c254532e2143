import numpy as np
import pytest
from scipy import stats

from bwesid.gmm import (
    BlockSplit,
    Gmm,
    GmmConditioner,
    conditional_mmse,
    conditional_quantile_estimate,
    em_fit,
    gmm_from_bytes,
    gmm_logpdf,
    gmm_to_bytes,
    load_gmm,
    marginal,
    save_gmm,
)


def _random_spd(rng, d, scale=1.0):
    a = rng.normal(size=(d, d))
    return scale * (a @ a.T + d * np.eye(d) * 0.1)


def _random_model(rng, m, d):
    weights = rng.dirichlet(np.ones(m))
    means = rng.normal(scale=3.0, size=(m, d))
    covs = np.stack([_random_spd(rng, d) for _ in range(m)])
    return Gmm(weights, means, covs)


def _sample(rng, model, n):
    comps = rng.choice(model.n_components, size=n, p=model.weights)
    out = np.empty((n, model.dimension))
    for j in range(model.n_components):
        sel = comps == j
        if sel.any():
            out[sel] = rng.multivariate_normal(model.means[j], model.covariances[j],
                                               size=int(sel.sum()))
    return out


# ---------------------------------------------------------------------------
# Validation and log density.

def test_gmm_validation():
    with pytest.raises(ValueError):
        Gmm(np.array([0.7, 0.7]), np.zeros((2, 1)), np.ones((2, 1, 1)))
    with pytest.raises(ValueError):
        Gmm(np.ones(1), np.zeros((1, 2)), np.array([[[1.0, 0.5], [0.3, 1.0]]]))


def test_logpdf_standard_normal():
    model = Gmm(np.ones(1), np.zeros((1, 1)), np.ones((1, 1, 1)))
    assert gmm_logpdf(model, np.zeros(1)) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)


def test_logpdf_translation_equivariance():
    rng = np.random.default_rng(0)
    model = _random_model(rng, 3, 4)
    x = rng.normal(size=4)
    v = rng.normal(size=4)
    shifted = Gmm(model.weights, model.means + v, model.covariances)
    assert gmm_logpdf(shifted, x + v) == pytest.approx(gmm_logpdf(model, x), abs=1e-12)


def test_logpdf_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        model = _random_model(rng, 3, 3)
        x = rng.normal(size=3)
        dens = 0.0
        for w, mu, cov in zip(model.weights, model.means, model.covariances):
            dens += w * stats.multivariate_normal.pdf(x, mu, cov)
        assert gmm_logpdf(model, x) == pytest.approx(np.log(dens), abs=1e-9)


def test_logpdf_dimension_mismatch():
    model = _random_model(np.random.default_rng(0), 2, 3)
    with pytest.raises(ValueError):
        gmm_logpdf(model, np.zeros(4))


# ---------------------------------------------------------------------------
# EM.

def test_em_single_component_closed_form():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(500, 3)) @ np.diag([1.0, 2.0, 0.5]) + [1.0, -2.0, 0.0]
    model = em_fit(data, 1, max_iter=3)
    assert np.abs(model.means[0] - data.mean(axis=0)).max() < 1e-10
    want = np.cov(data, rowvar=False, bias=True)
    assert np.abs(model.covariances[0] - want).max() < 1e-10
    assert model.weights[0] == pytest.approx(1.0)


def test_em_two_clusters():
    rng = np.random.default_rng(3)
    data = np.concatenate([
        rng.normal(loc=-10.0, size=(1000, 1)),
        rng.normal(loc=10.0, size=(1000, 1)),
    ])
    model = em_fit(data, 2, max_iter=50, seed=5)
    means = np.sort(model.means[:, 0])
    assert abs(means[0] + 10.0) < 0.1 and abs(means[1] - 10.0) < 0.1
    assert np.abs(model.weights - 0.5).max() < 0.05


def test_em_rank_deficient_data_floored():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(200, 3))
    data = np.column_stack([base, base[:, 2]])   # duplicated column
    model = em_fit(data, 2, max_iter=10, seed=0)
    for cov in model.covariances:
        np.linalg.cholesky(cov)


def test_em_log_likelihood_monotone():
    rng = np.random.default_rng(6)
    for trial in range(5):
        d = int(rng.integers(1, 4))
        true = _random_model(rng, 2, d)
        data = _sample(rng, true, 40 * d + 100)
        model = em_fit(data, 3, max_iter=50, tol=None, seed=trial)
        diffs = np.diff(model.fit_log_likelihood)
        assert diffs.min() >= -1e-9


def test_em_deterministic_given_seed():
    rng = np.random.default_rng(7)
    data = _sample(rng, _random_model(rng, 2, 2), 300)
    a = em_fit(data, 3, max_iter=20, seed=42)
    b = em_fit(data, 3, max_iter=20, seed=42)
    assert gmm_to_bytes(a) == gmm_to_bytes(b)
    c = em_fit(data, 3, max_iter=20, seed=43)
    assert gmm_to_bytes(a) != gmm_to_bytes(c)


def test_em_preconditions():
    rng = np.random.default_rng(8)
    with pytest.raises(ValueError, match="at least"):
        em_fit(rng.normal(size=(25, 3)), 2)
    bad = rng.normal(size=(100, 2))
    bad[3, 1] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        em_fit(bad, 2)


# ---------------------------------------------------------------------------
# Conditional estimators.

def test_mmse_single_gaussian_regression_formula():
    rng = np.random.default_rng(9)
    for _ in range(5):
        cov = _random_spd(rng, 4)
        mean = rng.normal(size=4)
        model = Gmm(np.ones(1), mean[None], cov[None])
        split = BlockSplit([0, 1], [2, 3])
        x = rng.normal(size=2)
        got = conditional_mmse(model, split, x)
        sxx = cov[:2, :2]
        syx = cov[2:, :2]
        want = mean[2:] + syx @ np.linalg.solve(sxx, x - mean[:2])
        assert np.abs(got - want).max() < 1e-12


def test_mmse_zero_cross_covariance():
    rng = np.random.default_rng(10)
    m = 3
    weights = rng.dirichlet(np.ones(m))
    means = rng.normal(size=(m, 2))
    covs = np.stack([np.diag(rng.uniform(0.5, 2.0, size=2)) for _ in range(m)])
    model = Gmm(weights, means, covs)
    split = BlockSplit([0], [1])
    x = np.array([0.3])
    got = conditional_mmse(model, split, x)[0]
    h = GmmConditioner(model, split).posterior_weights(x[None, :])[0]
    assert got == pytest.approx(float(h @ means[:, 1]), abs=1e-12)


def test_mmse_matches_quadrature_oracle():
    rng = np.random.default_rng(11)
    model = _random_model(rng, 3, 2)
    split = BlockSplit([0], [1])
    for xv in (-1.0, 0.2, 2.5):
        got = conditional_mmse(model, split, np.array([xv]))[0]
        ys = np.linspace(-40, 40, 200001)
        pts = np.column_stack([np.full_like(ys, xv), ys])
        pdf = np.exp(gmm_logpdf(model, pts))
        want = np.trapezoid(ys * pdf, ys) / np.trapezoid(pdf, ys)
        assert abs(got - want) < 1e-4


def test_mmse_beats_baselines_in_mse():
    rng = np.random.default_rng(12)
    model = _random_model(rng, 3, 2)
    split = BlockSplit([0], [1])
    data = _sample(rng, model, 100000)
    x, y = data[:, :1], data[:, 1]
    cond = GmmConditioner(model, split)
    est_mmse = cond.mmse(x)[:, 0]
    h = cond.posterior_weights(x)
    comp_means = cond.conditional_means(x)[:, :, 0]
    est_mode = comp_means[np.arange(len(x)), h.argmax(axis=1)]
    est_const = np.full_like(y, float(model.weights @ model.means[:, 1]))
    mse = lambda e: np.mean((e - y) ** 2)
    assert mse(est_mmse) < mse(est_mode)
    assert mse(est_mmse) < mse(est_const)


def test_quantile_symmetric_cost_is_median():
    model = Gmm(np.ones(1), np.array([[1.0, -0.5]]),
                np.array([[[2.0, 0.8], [0.8, 1.0]]]))
    split = BlockSplit([0], [1])
    x = np.array([2.0])
    got = conditional_quantile_estimate(model, split, x, 1.0, 1.0)
    want = -0.5 + 0.8 / 2.0 * (2.0 - 1.0)
    assert got == pytest.approx(want, abs=1e-8)


def test_quantile_matches_normal_table():
    model = Gmm(np.ones(1), np.array([[1.0, -0.5]]),
                np.array([[[2.0, 0.8], [0.8, 1.0]]]))
    split = BlockSplit([0], [1])
    x = np.array([2.0])
    mu = -0.5 + 0.8 / 2.0 * (2.0 - 1.0)
    sigma = np.sqrt(1.0 - 0.8**2 / 2.0)
    # a = 3b penalizes over-estimates: the optimum is the 25th percentile
    got = conditional_quantile_estimate(model, split, x, 3.0, 1.0)
    assert got == pytest.approx(mu - 0.67449 * sigma, abs=1e-6)
    for q, (a, b) in [(0.5, (1.0, 1.0)), (0.9, (1.0, 9.0)), (0.25, (3.0, 1.0))]:
        got = conditional_quantile_estimate(model, split, x, a, b)
        assert got == pytest.approx(mu + sigma * stats.norm.ppf(q), abs=1e-6)


def test_quantile_two_component_vs_numeric_cdf():
    rng = np.random.default_rng(13)
    model = _random_model(rng, 2, 2)
    split = BlockSplit([0], [1])
    x = np.array([0.4])
    got = conditional_quantile_estimate(model, split, x, 3.0, 1.0)
    cond = GmmConditioner(model, split)
    h = cond.posterior_weights(x[None, :])[0]
    mus = cond.conditional_means(x[None, :])[0, :, 0]
    sigmas = np.sqrt(cond.cond_cov[:, 0, 0])
    grid = np.linspace(mus.min() - 10 * sigmas.max(), mus.max() + 10 * sigmas.max(), 2000001)
    cdf = np.sum(h[None, :] * stats.norm.cdf((grid[:, None] - mus) / sigmas), axis=1)
    want = grid[np.searchsorted(cdf, 0.25)]
    assert abs(got - want) < 1e-4   # limited by the oracle grid spacing


def test_quantile_monotone_in_q():
    rng = np.random.default_rng(14)
    model = _random_model(rng, 3, 2)
    split = BlockSplit([0], [1])
    x = np.array([0.0])
    values = [conditional_quantile_estimate(model, split, x, 1.0 - q, q)
              for q in (0.1, 0.25, 0.5, 0.75, 0.9)]
    assert all(a <= b + 1e-9 for a, b in zip(values, values[1:]))


def test_quantile_below_mean_when_over_penalized():
    model = Gmm(np.ones(1), np.zeros((1, 2)), np.stack([np.eye(2)]))
    split = BlockSplit([0], [1])
    x = np.array([0.0])
    est = conditional_quantile_estimate(model, split, x, 3.0, 1.0)
    mean = conditional_mmse(model, split, x)[0]
    assert est <= mean


def test_quantile_requires_scalar_target_and_positive_penalties():
    rng = np.random.default_rng(15)
    model = _random_model(rng, 2, 3)
    with pytest.raises(ValueError):
        conditional_quantile_estimate(model, BlockSplit([0], [1, 2]), np.zeros(1), 1.0, 1.0)
    with pytest.raises(ValueError):
        conditional_quantile_estimate(model, BlockSplit([0, 1], [2]), np.zeros(2), 0.0, 1.0)


def test_block_split_validation():
    with pytest.raises(ValueError):
        BlockSplit([0, 1], [1, 2]).validate(3)
    with pytest.raises(ValueError):
        BlockSplit([0], [2]).validate(3)
    BlockSplit([0, 2], [1]).validate(3)


def test_marginal_density_consistency():
    rng = np.random.default_rng(16)
    model = _random_model(rng, 3, 3)
    sub = marginal(model, [0, 2])
    pts = rng.normal(size=(5, 2))
    # numerically integrate the full density over the dropped dimension
    ys = np.linspace(-40, 40, 100001)
    for p in pts:
        full = np.column_stack([np.full_like(ys, p[0]), ys, np.full_like(ys, p[1])])
        pdf = np.exp(gmm_logpdf(model, full))
        want = np.log(np.trapezoid(pdf, ys))
        assert gmm_logpdf(sub, p) == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------------------
# Serialization.

def test_gmm_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    model = _random_model(rng, 4, 3)
    path = tmp_path / "m.gmm"
    save_gmm(model, path)
    back = load_gmm(path)
    assert np.array_equal(back.weights, model.weights)
    assert np.array_equal(back.means, model.means)
    assert np.array_equal(back.covariances, model.covariances)


def test_gmm_serialization_rejects_corruption():
    rng = np.random.default_rng(18)
    blob = bytearray(gmm_to_bytes(_random_model(rng, 2, 2)))
    blob[25] ^= 0xFF
    with pytest.raises(ValueError, match="checksum"):
        gmm_from_bytes(bytes(blob))
    with pytest.raises(ValueError, match="GMM1"):
        gmm_from_bytes(b"JUNK" + bytes(40))
