import math

import numpy as np
import pytest

from certdesign import evt
from certdesign import problem as pb
from certdesign import stochastics as st


def _gev_draws(params, n, seed):
    """Synthetic GEV sample via the analytic quantile of uniforms."""
    u = st.key_from_seed(seed).generator().random(n)
    return gev_q_vec(params, u)


def gev_q_vec(params, u):
    return np.array([evt.gev_quantile(params, float(p)) for p in u])


# distribution kernels --------------------------------------------------------


@pytest.mark.parametrize("xi", [-0.5, -0.1, 0.0, 0.2, 0.7])
def test_cdf_at_location_is_exp_minus_one(xi):
    params = evt.GevParams(mu=1.3, sigma=0.7, xi=xi)
    assert evt.gev_cdf(params, 1.3) == pytest.approx(math.exp(-1.0))


def test_cdf_at_upper_endpoint():
    params = evt.GevParams(mu=0.0, sigma=1.0, xi=-0.5)
    assert params.upper_endpoint() == pytest.approx(2.0)
    assert evt.gev_cdf(params, 2.0) == pytest.approx(1.0)
    assert evt.gev_cdf(params, 5.0) == 1.0


def test_cdf_outside_lower_support():
    params = evt.GevParams(mu=0.0, sigma=1.0, xi=0.5)
    # support is z > mu - sigma/xi = -2
    assert evt.gev_cdf(params, -3.0) == 0.0


def test_gumbel_logpdf_at_location():
    params = evt.GevParams(mu=0.0, sigma=1.0, xi=0.0)
    assert evt.gev_logpdf(params, 0.0) == pytest.approx(-1.0)


def test_logpdf_minus_inf_outside_support():
    params = evt.GevParams(mu=0.0, sigma=1.0, xi=-0.5)
    assert evt.gev_logpdf(params, 3.0) == -np.inf


@pytest.mark.parametrize("xi", [-0.4, 0.0, 0.3])
def test_quantile_inverts_cdf(xi):
    params = evt.GevParams(mu=2.0, sigma=3.0, xi=xi)
    for z in [-1.0, 0.5, 2.0, 4.0, 7.0]:
        p = evt.gev_cdf(params, z)
        if 0.0 < p < 1.0:
            assert evt.gev_quantile(params, p) == pytest.approx(z, abs=1e-9)


def test_quantile_approaches_endpoint():
    params = evt.GevParams(mu=0.0, sigma=1.0, xi=-0.5)
    assert evt.gev_quantile(params, 1.0 - 1e-12) == pytest.approx(2.0, abs=1e-4)


def test_quantile_rejects_bad_p():
    params = evt.GevParams(mu=0.0, sigma=1.0, xi=0.1)
    with pytest.raises(ValueError):
        evt.gev_quantile(params, 0.0)
    with pytest.raises(ValueError):
        evt.gev_quantile(params, 1.0)


def test_cdf_monotone():
    z = np.linspace(-6, 6, 400)
    for xi in (-0.7, -0.2, 0.0, 0.2, 0.7):
        c = evt.gev_cdf(evt.GevParams(0.0, 1.0, xi), z)
        assert np.all(np.diff(c) >= -1e-15)


# MLE fitting ------------------------------------------------------------------


def test_fit_mle_recovers_synthetic():
    truth = evt.GevParams(mu=0.0, sigma=1.0, xi=-0.2)
    data = _gev_draws(truth, 5000, seed=1)
    fit = evt.fit_mle(data)
    assert abs(fit.mu - truth.mu) < 0.1
    assert abs(fit.sigma - truth.sigma) < 0.1
    assert abs(fit.xi - truth.xi) < 0.1


@pytest.mark.parametrize("xi", [-0.3, 0.0, 0.3])
def test_fit_mle_recovery_over_shapes(xi):
    truth = evt.GevParams(mu=0.0, sigma=1.0, xi=xi)
    data = _gev_draws(truth, 5000, seed=11)
    fit = evt.fit_mle(data)
    assert abs(fit.mu - truth.mu) < 0.1
    assert abs(fit.sigma - truth.sigma) < 0.1
    assert abs(fit.xi - truth.xi) < 0.1


def test_fit_mle_uniform_block_maxima_endpoint():
    rng = st.key_from_seed(3).generator()
    maxima = rng.random((2000, 1000)).max(axis=1)
    fit = evt.fit_mle(maxima)
    assert fit.xi < 0.0
    endpoint = fit.mu - fit.sigma / fit.xi
    assert 0.999 <= endpoint <= 1.001


def test_fit_mle_shift_equivariance():
    truth = evt.GevParams(mu=1.0, sigma=0.5, xi=0.1)
    data = _gev_draws(truth, 2000, seed=5)
    base = evt.fit_mle(data)
    shifted = evt.fit_mle(data + 42.0)
    assert shifted.mu == pytest.approx(base.mu + 42.0, abs=1e-6)
    assert shifted.sigma == pytest.approx(base.sigma, abs=1e-6)
    assert shifted.xi == pytest.approx(base.xi, abs=1e-6)


def test_fit_mle_scale_equivariance():
    truth = evt.GevParams(mu=1.0, sigma=0.5, xi=-0.15)
    data = _gev_draws(truth, 2000, seed=6)
    base = evt.fit_mle(data)
    scaled = evt.fit_mle(3.0 * data - 1.0)
    assert scaled.mu == pytest.approx(3.0 * base.mu - 1.0, rel=1e-3, abs=1e-3)
    assert scaled.sigma == pytest.approx(3.0 * base.sigma, rel=1e-3)
    assert scaled.xi == pytest.approx(base.xi, rel=1e-3, abs=1e-3)


def test_fit_mle_degenerate_data():
    with pytest.raises(evt.DegenerateDataError):
        evt.fit_mle(np.full(100, 2.5))


def test_fit_mle_needs_enough_points():
    with pytest.raises(ValueError):
        evt.fit_mle(np.arange(10.0))


# posterior fitting --------------------------------------------------------------


def _small_mcmc(seed=0, draws=800):
    return evt.McmcConfig(chains=4, tune=800, draws=draws, seed=seed)


def test_fit_posterior_recovers_synthetic():
    truth = evt.GevParams(mu=0.0, sigma=1.0, xi=-0.2)
    data = _gev_draws(truth, 5000, seed=1)
    post = evt.fit_posterior(data, _small_mcmc())
    med = post.medians()
    assert abs(med.mu - truth.mu) < 0.15
    assert abs(med.sigma - truth.sigma) < 0.15
    assert abs(med.xi - truth.xi) < 0.15
    mle = evt.fit_mle(data)
    lo = np.quantile(post.draws, 0.03, axis=0)
    hi = np.quantile(post.draws, 0.97, axis=0)
    for v, a, b in zip([mle.mu, mle.sigma, mle.xi], lo, hi):
        assert a <= v <= b
    assert np.all(post.r_hat < 1.1)
    assert post.draws.shape == (4 * 800, 3)
    assert np.all(post.draws[:, 1] > 0.0)


def test_fit_posterior_degenerate_data():
    with pytest.raises(evt.DegenerateDataError):
        evt.fit_posterior(np.zeros(50), _small_mcmc())


def test_fit_posterior_draw_count_stability():
    truth = evt.GevParams(mu=0.0, sigma=1.0, xi=-0.2)
    data = _gev_draws(truth, 3000, seed=9)
    q1 = np.quantile(
        evt.fit_posterior(data, _small_mcmc(draws=800)).draws[:, 0], 0.97
    )
    q2 = np.quantile(
        evt.fit_posterior(data, _small_mcmc(draws=1600)).draws[:, 0], 0.97
    )
    assert abs(q1 - q2) < 0.05


# block maxima collection ---------------------------------------------------------


def test_collect_constant_metric():
    prob = pb.get_problem("constant", value=4.0)
    maxima = evt.collect_worst_case_maxima(
        prob, [0.0], n_block=10, m_samples=7, seed=0
    )
    assert maxima == pytest.approx(np.full(7, 4.0))


def test_collect_single_rollout_blocks():
    prob = pb.get_problem("uniform-metric")
    maxima = evt.collect_worst_case_maxima(
        prob, [0.0], n_block=1, m_samples=5, seed=2
    )
    keys = st.split(st.key_from_seed(2), 5)
    singles = [prob.exogenous.sample_batch(k, 1)[0, 0] for k in keys]
    assert maxima == pytest.approx(singles)


def test_uniform_metric_pipeline_hard_bound():
    prob = pb.get_problem("uniform-metric")
    maxima = evt.collect_worst_case_maxima(
        prob, [0.0], n_block=500, m_samples=400, seed=4
    )
    post = evt.fit_posterior(maxima, _small_mcmc(seed=4))
    cert = evt.certify(post, confidence=0.97)
    assert cert.params.xi < 0.0
    assert cert.bound_type == "hard-bound"
    assert 0.998 <= cert.value <= 1.02
    assert cert.value >= maxima.max()


def test_sensitivity_linear_slope_constant():
    prob = pb.get_problem("scale-noise")  # J = theta * phi
    maxima = evt.collect_sensitivity_maxima(
        prob, [3.0], n_block=20, m_samples=30, seed=0
    )
    assert maxima == pytest.approx(np.full(30, 3.0))
    with pytest.raises(evt.DegenerateDataError):
        evt.fit_mle(maxima)


def test_sensitivity_frozen_segment_norm():
    # two segments; freezing one leaves the slope norm over the other only
    exo = st.CompositeSpec(
        [
            ("a", st.uniform([0.0], [1.0])),
            ("b", st.uniform([0.0], [2.0])),
        ]
    )

    def simulate(theta, phi):
        return pb.Trace(
            states=[[phi[0] * 2.0 + 0.0 * theta[0]]], dt=1.0, labels=["v"]
        )

    prob = pb.DesignProblem(
        name="twod",
        theta_dim=1,
        bounds_lo=np.array([-1.0]),
        bounds_hi=np.array([1.0]),
        exogenous=exo,
        simulate=simulate,
        cost=lambda tr: tr.states[0][0],
        theta_init=np.array([0.0]),
        horizon=1,
        dt=1.0,
    )
    maxima = evt.collect_sensitivity_maxima(
        prob, [0.0], n_block=10, m_samples=20, seed=1, frozen_segments=("b",)
    )
    # J = 2 a, norm over coordinate a only: every slope is exactly 2
    assert maxima == pytest.approx(np.full(20, 2.0))


def test_sensitivity_heavy_tail_nonnegative_shape():
    # J = ||phi||^2 on N(0, I2): slope draws are heavy-tailed
    exo = st.CompositeSpec([("g", st.gaussian(np.zeros(2), np.eye(2)))])

    def simulate(theta, phi):
        return pb.Trace(
            states=[[phi[0] * phi[0] + phi[1] * phi[1] + 0.0 * theta[0]]],
            dt=1.0,
            labels=["v"],
        )

    prob = pb.DesignProblem(
        name="norm2",
        theta_dim=1,
        bounds_lo=np.array([-1.0]),
        bounds_hi=np.array([1.0]),
        exogenous=exo,
        simulate=simulate,
        cost=lambda tr: tr.states[0][0],
        theta_init=np.array([0.0]),
        horizon=1,
        dt=1.0,
    )
    maxima_small = evt.collect_sensitivity_maxima(
        prob, [0.0], n_block=50, m_samples=150, seed=3
    )
    maxima_large = evt.collect_sensitivity_maxima(
        prob, [0.0], n_block=500, m_samples=150, seed=3
    )
    assert maxima_large.mean() > maxima_small.mean()
    fit = evt.fit_mle(maxima_large)
    assert fit.xi > -0.1


# certificates --------------------------------------------------------------------


def _point_posterior(mu, sigma, xi, data):
    draws = np.tile([mu, sigma, xi], (100, 1))
    return evt.GevPosterior(
        draws=draws,
        data=np.asarray(data, dtype=float),
        chain_count=4,
        draws_per_chain=25,
        acceptance_rate=0.3,
        r_hat=np.ones(3),
    )


def test_certify_hard_bound_arithmetic():
    post = _point_posterior(1.0, 0.5, -0.2, data=[0.5, 1.2, 2.0])
    cert = evt.certify(post)
    assert cert.bound_type == "hard-bound"
    assert cert.value == pytest.approx(3.5)
    assert cert.diagnostics["hard_bound_consistent"]


def test_certify_inconsistent_hard_bound_flagged():
    post = _point_posterior(1.0, 0.5, -0.2, data=[0.5, 9.9])
    cert = evt.certify(post)
    assert not cert.diagnostics["hard_bound_consistent"]
    assert any("inconsistent" in w for w in cert.diagnostics["warnings"])


def test_certify_quantile_bound_path():
    post = _point_posterior(1.0, 0.5, 0.118, data=[0.5, 1.2])
    cert = evt.certify(post, confidence=0.97)
    assert cert.bound_type == "quantile-bound"
    expected = evt.gev_quantile(evt.GevParams(1.0, 0.5, 0.118), 0.97)
    assert cert.value == pytest.approx(expected)


# KS validation --------------------------------------------------------------------


def test_ks_well_specified_fails_to_reject():
    params = evt.GevParams(mu=0.0, sigma=1.0, xi=0.1)
    data = _gev_draws(params, 10_000, seed=8)
    for direction in ("false-optimism", "conservatism"):
        rep = evt.ks_one_sided(data, lambda z: evt.gev_cdf(params, z), direction)
        assert rep.statistic < 0.02
        assert not rep.reject_null


def test_ks_shifted_data_not_rejected_for_false_optimism():
    params = evt.GevParams(mu=0.0, sigma=1.0, xi=0.0)
    data = _gev_draws(params, 2000, seed=2) + 10.0
    rep = evt.ks_one_sided(
        data, lambda z: evt.gev_cdf(params, z), "false-optimism"
    )
    assert not rep.reject_null
    assert rep.statistic < 1e-6


def test_ks_sound_bands_reject_both_nulls():
    # 97%/3% bands around a posterior fit of well-specified data should be
    # detectably conservative/optimistic respectively: both nulls rejected
    truth = evt.GevParams(mu=0.0, sigma=1.0, xi=0.05)
    fit_data = _gev_draws(truth, 1000, seed=21)
    post = evt.fit_posterior(fit_data, _small_mcmc(seed=21))
    fresh = _gev_draws(truth, 2000, seed=22)
    hi = evt.params_at_confidence(post, 0.97)
    lo = evt.params_at_confidence(post, 0.03)
    rep_fo = evt.ks_one_sided(
        fresh, lambda z: evt.gev_cdf(hi, z), "false-optimism"
    )
    rep_co = evt.ks_one_sided(
        fresh, lambda z: evt.gev_cdf(lo, z), "conservatism"
    )
    assert rep_fo.reject_null
    assert rep_co.reject_null


def test_ks_paper_pvalue_formula():
    rep = evt.KsReport("false-optimism", 0.0410, 0.0, False)
    # the asymptotic one-sided formula at the published statistic and n=1000
    assert math.exp(-2 * 1000 * rep.statistic**2) == pytest.approx(
        0.0347, abs=0.001
    )


def test_ks_needs_enough_points():
    params = evt.GevParams(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        evt.ks_one_sided(np.zeros(5), lambda z: evt.gev_cdf(params, z), "conservatism")


# Cantelli diagnostic -----------------------------------------------------------------


def test_cantelli_zero_variance():
    emp, bound = evt.cantelli_diagnostic(np.full(100, 2.0), j_max=10.0, alpha=0.5)
    assert emp == 0.0
    assert bound == 0.0


def test_cantelli_normal_tail():
    costs = st.key_from_seed(0).generator().standard_normal(100_000)
    emp, bound = evt.cantelli_diagnostic(costs, j_max=4.0, alpha=0.5)
    assert emp == pytest.approx(0.0228, abs=0.005)
    assert bound == pytest.approx(1.0 / 5.0, abs=0.01)
    assert emp <= bound


def test_cantelli_threshold_below_mean():
    costs = np.array([1.0, 2.0, 3.0])
    emp, bound = evt.cantelli_diagnostic(costs, j_max=2.0, alpha=0.5)
    assert bound == 1.0
    assert emp == pytest.approx(2.0 / 3.0)


def test_cantelli_bound_holds_across_datasets():
    rng = st.key_from_seed(5).generator()
    for _ in range(10):
        costs = rng.gamma(2.0, 1.5, size=20_000)
        emp, bound = evt.cantelli_diagnostic(costs, j_max=costs.max(), alpha=0.6)
        assert emp <= bound + 3.0 * math.sqrt(bound / costs.size + 1e-12)
