import numpy as np
import pytest
from conftest import make_dataset, make_state
from oracles import dense_smoother, filtered_marginal, mc_se, mixture_weights_enumerated

from pdfsv.dgp import scenario_preset, simulate_panel
from pdfsv.model import LogVolPaths, ModelError
from pdfsv.volatility import (
    KSC_TABLE,
    LOG_CHI2_MEAN,
    LOG_CHI2_VAR,
    MixtureTable,
    StateSpaceView,
    VolatilityError,
    VolPrior,
    backward_sample,
    backward_sample_paths,
    build_state_space,
    forward_filter,
    linearized_observations,
    log_chi2_logpdf,
    log_squared,
    mixture_probabilities,
    sample_mixture_indicators,
    sample_vol_coeffs,
    vol_coeff_posterior,
)


def _view(z, r, a0, a1, q, c=None):
    z = np.atleast_2d(np.asarray(z, float))
    s = z.shape[0]
    return StateSpaceView(
        z=z,
        c=np.zeros_like(z) if c is None else c,
        sigma_e=np.broadcast_to(np.asarray(r, float), z.shape).copy(),
        alpha=np.column_stack([np.broadcast_to(a0, (s,)), np.broadcast_to(a1, (s,))]).astype(float),
        sigma_nu=np.broadcast_to(np.asarray(q, float), (s,)).astype(float),
    )


def test_table_weights_and_moments():
    assert abs(KSC_TABLE.weights.sum() - 1.0) < 1e-12
    assert KSC_TABLE.n_components == 7
    assert abs(KSC_TABLE.mean() - LOG_CHI2_MEAN) < 0.02
    assert abs(KSC_TABLE.variance() - LOG_CHI2_VAR) < 0.1
    assert LOG_CHI2_MEAN == pytest.approx(-1.27036, abs=1e-5)


def test_table_rejects_bad_weights():
    with pytest.raises(ValueError):
        MixtureTable(np.array([0.5, 0.6]), np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        MixtureTable(np.array([0.5, 0.5]), np.zeros(2), np.array([1.0, 0.0]))


def test_log_chi2_density_integrates_to_one():
    x = np.linspace(-40, 5, 200_001)
    assert np.trapezoid(np.exp(log_chi2_logpdf(x)), x) == pytest.approx(1.0, abs=1e-6)


def test_log_offset_example():
    z = log_squared(np.ones((1, 4)))
    # unit residuals have zero sample variance, so the fallback scale 1 applies
    np.testing.assert_allclose(z, np.log(1 + 1e-6), rtol=1e-12)
    assert z[0, 0] == pytest.approx(9.99e-7, abs=1e-9)


def test_log_offset_is_relative_to_row_variance():
    x = np.array([[0.0, 2.0, -2.0, 0.0]])
    z = log_squared(x)
    assert z[0, 0] == pytest.approx(np.log(1e-6 * x.var()), rel=1e-12)


def test_state_space_shape_m1():
    ds, truth = simulate_panel(scenario_preset("M1", seed=1))
    z = linearized_observations(ds, truth.state)
    state = truth.state.evolve(mixture_indicators=sample_mixture_indicators(z - truth.state.logvols.stacked(), rng=0))
    view = build_state_space(ds, state, z=z)
    assert view.z.shape == (13, 200)
    assert view.c.shape == view.sigma_e.shape == (13, 200)
    assert view.n_individuals == 10
    intercept, slope, _ = truth.state.volcoeffs.stacked()
    np.testing.assert_array_equal(view.alpha[:10, 0], truth.state.volcoeffs.alpha0)
    np.testing.assert_array_equal(view.alpha[10:, 1], truth.state.volcoeffs.phi1)
    idx = state.mixture_indicators.astype(int) - 1
    np.testing.assert_array_equal(view.c, KSC_TABLE.means[idx])


def test_state_space_needs_indicators(rng):
    ds = make_dataset(rng)
    state = make_state(rng, indicators=False)
    with pytest.raises(ModelError):
        build_state_space(ds, state)


def test_noise_free_round_trip(rng):
    ds = make_dataset(rng, n=3, t=50)
    state = make_state(rng, n=3, t=50, p=1)
    z = linearized_observations(ds, state)
    from pdfsv.model import residuals

    u = residuals(ds, state)
    keep = u**2 > 1e-3 * u.var(axis=1, keepdims=True)
    np.testing.assert_allclose(np.exp(z[:3])[keep], (u**2)[keep], rtol=1e-2)


def test_log_eta_squared_mean():
    rng = np.random.default_rng(5)
    x = np.log(rng.standard_normal(1_000_000) ** 2)
    assert abs(x.mean() - (-1.27036)) < 0.01


def test_mixture_probabilities_sum_to_one(rng):
    p = mixture_probabilities(rng.normal(-1.0, 3.0, size=(5, 40)))
    assert p.shape == (5, 40, 7)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_mixture_probabilities_match_enumeration():
    for e in (-12.0, -3.0, 0.0, 1.5):
        np.testing.assert_allclose(
            mixture_probabilities(np.array(e)),
            mixture_weights_enumerated(e, KSC_TABLE.weights, KSC_TABLE.means, KSC_TABLE.variances),
            atol=1e-12,
        )


def test_mode_component_is_most_likely():
    p = mixture_probabilities(np.array(KSC_TABLE.means[4]))
    assert np.argmax(p) == 4


def test_indicator_frequencies_match_enumeration():
    rng = np.random.default_rng(11)
    grid = np.array([-8.0, -2.0, 0.5, 2.0])
    n = 100_000
    s = sample_mixture_indicators(np.tile(grid, (n, 1)), rng=rng)
    assert s.min() >= 1 and s.max() <= 7
    for j, e in enumerate(grid):
        expected = mixture_weights_enumerated(e, KSC_TABLE.weights, KSC_TABLE.means, KSC_TABLE.variances)
        freq = np.bincount(s[:, j] - 1, minlength=7) / n
        se = np.sqrt(expected * (1 - expected) / n)
        assert np.all(np.abs(freq - expected) <= 3 * se + 1e-12)


def test_filter_single_period_closed_form():
    prior_m, prior_v, r, z, c = 0.4, 2.0, 0.7, -1.3, 0.25
    mom = forward_filter(_view([[z]], r, 0.0, 0.5, 0.1, c=np.array([[c]])), prior_m, prior_v)
    prec = 1 / prior_v + 1 / r
    assert mom.m[0, 0] == pytest.approx((prior_m / prior_v + (z - c) / r) / prec, abs=1e-12)
    assert mom.cov(0)[0, 0] == pytest.approx(1 / prec, abs=1e-12)


def test_filter_static_limit_is_precision_weighted_mean(rng):
    t = 30
    z = rng.normal(1.0, 2.0, size=(1, t))
    r = rng.uniform(0.5, 3.0, size=(1, t))
    view = StateSpaceView(z=z, c=np.zeros_like(z), sigma_e=r, alpha=np.array([[0.0, 1.0]]), sigma_nu=np.zeros(1))
    mom = forward_filter(view, 0.0, 1e12)
    w = 1 / r[0]
    expected = np.sum(w * z[0]) / (np.sum(w) + 1e-12)
    assert mom.m[0, -1] == pytest.approx(expected, abs=1e-10)
    assert mom.D[0, -1] == pytest.approx(1 / (np.sum(w) + 1e-12), abs=1e-10)


def test_filter_matches_dense_oracle_two_states(rng):
    t = 4
    a0, a1, q = np.array([0.1, -0.2]), np.array([0.8, 0.3]), np.array([0.4, 0.9])
    z = rng.normal(size=(2, t))
    r = rng.uniform(0.5, 2.0, size=(2, t))
    c = rng.normal(size=(2, t))
    view = StateSpaceView(z=z, c=c, sigma_e=r, alpha=np.column_stack([a0, a1]), sigma_nu=q)
    for method in ("univariate", "dense"):
        mom = forward_filter(view, np.zeros(2), np.full(2, 10.0), method=method)
        for tt in range(t):
            mean, cov = filtered_marginal(z - c, r, a0, a1, q, 0.0, 10.0, tt)
            np.testing.assert_allclose(mom.m[:, tt], mean, atol=1e-10)
            np.testing.assert_allclose(mom.cov(tt), cov, atol=1e-10)


def test_univariate_and_dense_filters_agree(rng):
    s, t = 4, 25
    view = _view(rng.normal(size=(s, t)), rng.uniform(0.3, 3.0, size=(s, t)), rng.normal(0, 0.2, s), rng.uniform(-0.95, 0.95, s), rng.uniform(0.05, 1.0, s))
    a = forward_filter(view, np.zeros(s), np.full(s, 10.0), method="univariate")
    b = forward_filter(view, np.zeros(s), np.full(s, 10.0), method="dense")
    np.testing.assert_allclose(a.m, b.m, atol=1e-10)
    for tt in range(t):
        np.testing.assert_allclose(a.cov(tt), b.cov(tt), atol=1e-10)


def test_filter_rejects_bad_initial_covariance():
    view = _view(np.zeros((2, 3)), 1.0, 0.0, 0.5, 0.1)
    with pytest.raises(VolatilityError):
        forward_filter(view, np.zeros(2), np.array([1.0, -1.0]))
    with pytest.raises(VolatilityError):
        forward_filter(view, np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        forward_filter(view, np.zeros(2), np.eye(2), method="bogus")


def test_backward_draw_at_last_period_matches_filter(rng):
    view = _view(rng.normal(size=(2, 5)), 1.0, 0.1, 0.7, 0.3)
    mom = forward_filter(view, np.zeros(2), np.full(2, 10.0))
    draws = backward_sample_paths(mom, view, rng, size=100_000)[:, :, -1]
    assert np.all(np.abs(draws.mean(0) - mom.m[:, -1]) < 3 * mc_se(draws))
    var = draws.var(0)
    assert np.all(np.abs(var - mom.D[:, -1]) < 3 * mom.D[:, -1] * np.sqrt(2 / len(draws)))


def test_backward_sample_constant_without_innovations(rng):
    view = StateSpaceView(
        z=rng.normal(size=(3, 8)), c=np.zeros((3, 8)), sigma_e=np.ones((3, 8)),
        alpha=np.tile([0.0, 1.0], (3, 1)), sigma_nu=np.zeros(3), n_individuals=2,
    )
    for method in ("univariate", "dense"):
        mom = forward_filter(view, np.zeros(3), np.full(3, 10.0), method=method)
        path = backward_sample_paths(mom, view, rng)
        assert np.max(np.abs(path - path[:, -1:])) < 1e-8


def test_backward_sample_splits_rows(rng):
    view = _view(rng.normal(size=(3, 6)), 1.0, 0.0, 0.5, 0.2)
    view = StateSpaceView(view.z, view.c, view.sigma_e, view.alpha, view.sigma_nu, n_individuals=2)
    out = backward_sample(forward_filter(view, 0.0, 10.0), view, rng)
    assert isinstance(out, LogVolPaths)
    assert out.h.shape == (2, 6) and out.q.shape == (1, 6)


def test_backward_paths_match_dense_smoother_univariate():
    rng = np.random.default_rng(21)
    t = 4
    z = rng.normal(size=(1, t))
    r = rng.uniform(0.5, 2.0, size=(1, t))
    view = _view(z, r, 0.2, 0.9, 0.5)
    mom = forward_filter(view, 0.0, 10.0)
    draws = backward_sample_paths(mom, view, rng, size=100_000)[:, 0, :]
    mean, cov = dense_smoother(z, r, 0.2, 0.9, 0.5, 0.0, 10.0)
    assert np.all(np.abs(draws.mean(0) - mean) < 3 * mc_se(draws))
    emp = np.cov(draws, rowvar=False)
    se = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / len(draws))
    assert np.all(np.abs(emp - cov) < 3.5 * se)


def test_vol_coeff_flat_prior_is_ols(rng):
    paths = rng.normal(size=(3, 40)).cumsum(axis=1) * 0.1
    inf = np.full((3, 2), np.inf)
    mean, V, nu_post, ss = vol_coeff_posterior(paths, np.zeros((3, 2)), inf, 0.0, 0.0)
    for s in range(3):
        X = np.column_stack([np.ones(39), paths[s, :-1]])
        ols, rss = np.linalg.lstsq(X, paths[s, 1:], rcond=None)[:2]
        np.testing.assert_allclose(mean[s], ols, atol=1e-10)
        np.testing.assert_allclose(V[s], np.linalg.inv(X.T @ X), atol=1e-10)
        assert ss[s] == pytest.approx(rss[0], rel=1e-8)
    assert nu_post == 39


def test_vol_coeff_posterior_matches_oracle(rng):
    paths = rng.normal(size=(1, 30))
    pm, pv = np.array([[0.1, 0.5]]), np.array([[0.2, 0.3]])
    mean, V, nu_post, ss = vol_coeff_posterior(paths, pm, pv, 4.0, 0.3)
    from oracles import conjugate_regression

    X = np.column_stack([np.ones(29), paths[0, :-1]])
    m_ref, v_ref = conjugate_regression(X, paths[0, 1:], 1.0, pm[0], np.diag(1 / pv[0]))
    np.testing.assert_allclose(mean[0], m_ref, atol=1e-10)
    np.testing.assert_allclose(V[0], v_ref, atol=1e-10)
    resid = paths[0, 1:] - X @ m_ref
    dev = m_ref - pm[0]
    assert ss[0] == pytest.approx(4.0 * 0.3 + resid @ resid + dev @ np.diag(1 / pv[0]) @ dev, rel=1e-10)


def test_vol_coeff_draw_moments_match_nig(rng):
    paths = LogVolPaths(rng.normal(size=(1, 60)), np.zeros((0, 60)))
    prior = VolPrior()
    pm, pv = prior.stacked(1, 0)
    mean, V, nu_post, ss = vol_coeff_posterior(paths.stacked(), pm, pv, prior.nu, prior.s2)
    draws = [sample_vol_coeffs(paths, prior, rng) for _ in range(20_000)]
    s2 = np.array([d.sigma2_v[0] for d in draws])
    a = np.array([[d.alpha0[0], d.alpha1[0]] for d in draws])
    # stationarity truncation is immaterial here: the slope posterior sits far inside (-1, 1)
    assert abs(s2.mean() - ss[0] / (nu_post - 2)) < 3 * mc_se(s2)
    assert np.all(np.abs(a.mean(0) - mean[0]) < 3 * mc_se(a))


def test_vol_coeff_recovery_long_path():
    rng = np.random.default_rng(4)
    t = 5000
    h = np.empty(t)
    h[0] = 0.08 / 0.15
    for s in range(1, t):
        h[s] = 0.08 + 0.85 * h[s - 1] + rng.normal(0, np.sqrt(0.1))
    paths = LogVolPaths(h[None, :], np.zeros((0, t)))
    draws = [sample_vol_coeffs(paths, VolPrior(), rng) for _ in range(2000)]
    assert abs(np.mean([d.alpha0[0] for d in draws]) - 0.08) < 0.05
    assert abs(np.mean([d.alpha1[0] for d in draws]) - 0.85) < 0.05


def test_vol_variance_draws_positive(rng):
    paths = LogVolPaths(rng.normal(size=(5, 30)), rng.normal(size=(2, 30)))
    for _ in range(100):
        vc = sample_vol_coeffs(paths, VolPrior(), rng)
        assert np.all(vc.sigma2_v > 0) and np.all(vc.sigma2_w > 0)
        assert np.all(np.abs(vc.alpha1) < 1) and np.all(np.abs(vc.phi1) < 1)


def test_retry_budget_exhaustion_is_reported(rng):
    # an explosive path puts almost all posterior slope mass above 1
    h = 1.2 ** np.arange(40)
    paths = LogVolPaths(h[None, :], np.zeros((0, 40)))
    with pytest.raises(VolatilityError, match="retry budget"):
        sample_vol_coeffs(paths, VolPrior(), rng, retry_budget=5)


def test_short_paths_rejected(rng):
    with pytest.raises(VolatilityError):
        sample_vol_coeffs(LogVolPaths(np.zeros((1, 2)), np.zeros((0, 2))), VolPrior(), rng)
