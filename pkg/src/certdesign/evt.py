"""Extreme-value certification of optimized designs.

Block maxima of rollout metrics (worst-case cost) or of finite-slope draws
(sensitivity) are fit with a Generalized Extreme Value distribution, by
maximum likelihood and by MCMC posterior sampling; certificates then state a
hard bound (negative shape: bounded support) or a high-confidence quantile
bound, and one-sided Kolmogorov-Smirnov tests check the fit for false
optimism and conservatism against fresh data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import stochastics as st

__all__ = [
    "GevParams",
    "GevPosterior",
    "Certificate",
    "KsReport",
    "McmcConfig",
    "DegenerateDataError",
    "DivergentRolloutError",
    "gev_cdf",
    "gev_logpdf",
    "gev_quantile",
    "fit_mle",
    "fit_posterior",
    "collect_worst_case_maxima",
    "collect_sensitivity_maxima",
    "params_at_confidence",
    "certify",
    "ks_one_sided",
    "cantelli_diagnostic",
]

_XI_TINY = 1e-9  # below this the Gumbel limit form is used


class DegenerateDataError(ValueError):
    """All block maxima equal: the data is a point mass, nothing to fit."""


class DivergentRolloutError(RuntimeError):
    """Some rollouts diverged; the affected blocks invalidate certification."""

    def __init__(self, blocks):
        self.blocks = list(blocks)
        super().__init__(
            f"divergent rollouts in {len(self.blocks)} block(s): "
            f"{self.blocks[:10]}"
        )


@dataclass(frozen=True)
class GevParams:
    """Location, scale (> 0), shape of a GEV law."""

    mu: float
    sigma: float
    xi: float

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")

    def upper_endpoint(self):
        """Finite right endpoint mu - sigma/xi when xi < 0, else +inf."""
        if self.xi < -_XI_TINY:
            return self.mu - self.sigma / self.xi
        return math.inf


def gev_cdf(params, z):
    """G(z) = exp{-[1 + xi (z-mu)/sigma]^(-1/xi)}; Gumbel form at xi = 0.

    Outside the support this returns 0 (left of a lower endpoint) or 1
    (right of an upper endpoint). Accepts scalar or array z.
    """
    z = np.asarray(z, dtype=float)
    y = (z - params.mu) / params.sigma
    xi = params.xi
    if abs(xi) < _XI_TINY:
        out = np.exp(-np.exp(-y))
    else:
        t = 1.0 + xi * y
        inside = t > 0.0
        out = np.empty_like(y)
        with np.errstate(all="ignore"):
            out[inside] = np.exp(-np.power(t[inside], -1.0 / xi))
        # left of support for xi > 0, right of support for xi < 0
        out[~inside] = 0.0 if xi > 0.0 else 1.0
    return float(out) if out.ndim == 0 else out


def gev_logpdf(params, z):
    """Log density of the GEV law; -inf outside the support."""
    z = np.asarray(z, dtype=float)
    y = (z - params.mu) / params.sigma
    logs = math.log(params.sigma)
    xi = params.xi
    if abs(xi) < _XI_TINY:
        out = -logs - y - np.exp(-y)
    else:
        t = 1.0 + xi * y
        inside = t > 0.0
        out = np.full_like(y, -np.inf)
        with np.errstate(all="ignore"):
            ti = t[inside]
            out[inside] = (
                -logs - (1.0 + 1.0 / xi) * np.log(ti) - np.power(ti, -1.0 / xi)
            )
    return float(out) if out.ndim == 0 else out


def gev_quantile(params, p):
    """Analytic inverse of gev_cdf; requires p in (0, 1)."""
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ValueError("quantile level must lie strictly inside (0, 1)")
    xi = params.xi
    if abs(xi) < _XI_TINY:
        out = params.mu - params.sigma * np.log(-np.log(p_arr))
    else:
        out = params.mu + params.sigma * (np.power(-np.log(p_arr), -xi) - 1.0) / xi
    return float(out) if np.ndim(p) == 0 else out


# fitting ---------------------------------------------------------------------


def _standardized_nll(data):
    """Negative log likelihood over (mu, log sigma, xi) for standardized data."""

    def nll(params):
        mu, log_sigma, xi = params
        sigma = math.exp(log_sigma)
        y = (data - mu) / sigma
        if abs(xi) < _XI_TINY:
            return float(np.sum(log_sigma + y + np.exp(-y)))
        t = 1.0 + xi * y
        bad = t <= 1e-12
        if np.any(bad):
            # smooth-ish penalty sloping back toward the feasible region
            return 1e10 * (1.0 + float(np.sum(1e-12 - t[bad])))
        with np.errstate(all="ignore"):
            val = np.sum(
                log_sigma + (1.0 + 1.0 / xi) * np.log(t) + np.power(t, -1.0 / xi)
            )
        return float(val) if np.isfinite(val) else 1e10

    return nll


def _check_fittable(maxima):
    maxima = np.asarray(maxima, dtype=float).ravel()
    if maxima.size < 20:
        raise ValueError("GEV fitting needs at least 20 block maxima")
    if not np.all(np.isfinite(maxima)):
        raise ValueError("block maxima must be finite")
    mx, mn = maxima.max(), maxima.min()
    if mx - mn <= 1e-9 * max(abs(mx), abs(mn), 1e-30):
        raise DegenerateDataError(
            "all block maxima are (numerically) identical; the extreme-value "
            "framework does not apply to a point mass"
        )
    return maxima


def fit_mle(maxima):
    """Maximum-likelihood GEV fit via multi-start bounded quasi-Newton.

    Fitting runs on standardized data, which makes the result exactly
    location/scale equivariant; parameters are mapped back afterwards.
    """
    maxima = _check_fittable(maxima)
    m = float(maxima.mean())
    s = float(maxima.std(ddof=1))
    data = (maxima - m) / s

    nll = _standardized_nll(data)
    # Gumbel method-of-moments start for (mu, sigma) at each trial shape
    sigma0 = math.sqrt(6.0) / math.pi
    mu0 = -0.57721566 * sigma0
    best = None
    for xi0 in (-0.4, -0.15, 1e-4, 0.15, 0.4):
        res = minimize(
            nll,
            x0=np.array([mu0, math.log(sigma0), xi0]),
            method="L-BFGS-B",
            bounds=[(-10.0, 10.0), (-10.0, 5.0), (-3.0, 3.0)],
        )
        if best is None or res.fun < best.fun:
            best = res
    mu_t, log_sigma_t, xi_t = best.x
    params = GevParams(
        mu=m + s * mu_t, sigma=s * math.exp(log_sigma_t), xi=float(xi_t)
    )
    support = 1.0 + params.xi * (maxima - params.mu) / params.sigma
    if np.any(support <= 0.0):
        raise RuntimeError("MLE ended with data outside the fitted support")
    return params


@dataclass
class McmcConfig:
    chains: int = 4
    tune: int = 2000
    draws: int = 2000
    seed: int = 0
    target_accept: float = 0.3


@dataclass
class GevPosterior:
    """Pooled post-burn-in MCMC draws of (mu, sigma, xi) plus diagnostics."""

    draws: np.ndarray  # (K, 3) columns mu, sigma, xi
    data: np.ndarray
    chain_count: int
    draws_per_chain: int
    acceptance_rate: float
    r_hat: np.ndarray  # per-parameter split-Rhat
    warnings: list = field(default_factory=list)

    def medians(self):
        med = np.median(self.draws, axis=0)
        return GevParams(mu=float(med[0]), sigma=float(med[1]), xi=float(med[2]))

    def quantile_params(self, level):
        q = np.quantile(self.draws, level, axis=0)
        return GevParams(mu=float(q[0]), sigma=float(q[1]), xi=float(q[2]))


def _split_r_hat(chains):
    """Split-Rhat across chains for one parameter; chains is (C, n)."""
    half = chains.shape[1] // 2
    segs = np.concatenate([chains[:, :half], chains[:, half : 2 * half]], axis=0)
    mseg, n = segs.shape
    seg_means = segs.mean(axis=1)
    seg_vars = segs.var(axis=1, ddof=1)
    w = seg_vars.mean()
    b = n * seg_means.var(ddof=1)
    if w <= 0.0:
        return math.inf
    var_plus = (n - 1) / n * w + b / n
    return math.sqrt(var_plus / w)


def fit_posterior(maxima, config=None):
    """Adaptive random-walk Metropolis over (mu, log sigma, xi).

    Four chains start from the jittered MLE; proposal scale and covariance
    adapt during tuning only, so the kept draws target the exact posterior.
    Priors: mu ~ N(sample mean, 10 sample std), log sigma ~ N(log sample
    std, 2), xi ~ N(0, 0.5). A split-Rhat above 1.1 attaches a warning.
    """
    config = config or McmcConfig()
    maxima = _check_fittable(maxima)
    m = float(maxima.mean())
    s = float(maxima.std(ddof=1))
    data = (maxima - m) / s
    nll = _standardized_nll(data)

    # priors in standardized coordinates (exactly equivariant)
    def log_post(params):
        lp = -nll(params)
        if not np.isfinite(lp):
            return -np.inf
        mu, log_sigma, xi = params
        lp -= 0.5 * (mu / 10.0) ** 2
        lp -= 0.5 * (log_sigma / 2.0) ** 2
        lp -= 0.5 * (xi / 0.5) ** 2
        return lp

    mle = fit_mle(maxima)
    center = np.array(
        [(mle.mu - m) / s, math.log(mle.sigma / s), mle.xi]
    )

    key = st.key_from_seed(config.seed)
    chain_keys = st.split(key, config.chains)
    kept = np.empty((config.chains, config.draws, 3))
    accept_counts = np.zeros(config.chains)

    for c in range(config.chains):
        rng = chain_keys[c].generator()
        x = center + 0.05 * rng.standard_normal(3)
        lp = log_post(x)
        while not np.isfinite(lp):
            x = center + 0.01 * rng.standard_normal(3)
            lp = log_post(x)
        cov_chol = np.diag([0.05, 0.05, 0.05])
        log_scale = 0.0
        history = np.empty((config.tune, 3))
        for t in range(config.tune):
            prop = x + math.exp(log_scale) * (cov_chol @ rng.standard_normal(3))
            lp_prop = log_post(prop)
            accept = math.log(rng.random() + 1e-300) < lp_prop - lp
            if accept:
                x, lp = prop, lp_prop
            history[t] = x
            log_scale += (float(accept) - config.target_accept) / math.sqrt(
                t + 10.0
            )
            if t >= 199 and (t + 1) % 200 == 0:
                emp = np.cov(history[max(0, t - 999) : t + 1].T)
                emp = (2.38**2 / 3.0) * emp + 1e-8 * np.eye(3)
                try:
                    cov_chol = np.linalg.cholesky(emp)
                except np.linalg.LinAlgError:
                    pass
        # proposal frozen for the kept phase
        step_chol = math.exp(log_scale) * cov_chol
        for t in range(config.draws):
            prop = x + step_chol @ rng.standard_normal(3)
            lp_prop = log_post(prop)
            if math.log(rng.random() + 1e-300) < lp_prop - lp:
                x, lp = prop, lp_prop
                accept_counts[c] += 1
            kept[c, t] = x

    r_hat = np.array([_split_r_hat(kept[:, :, j]) for j in range(3)])
    warnings = []
    if np.any(r_hat > 1.1):
        warnings.append(
            "MCMC convergence suspect: split-Rhat "
            f"{np.round(r_hat, 4).tolist()} exceeds 1.1"
        )

    pooled = kept.reshape(-1, 3)
    draws = np.column_stack(
        [
            m + s * pooled[:, 0],
            s * np.exp(pooled[:, 1]),
            pooled[:, 2],
        ]
    )
    return GevPosterior(
        draws=draws,
        data=maxima,
        chain_count=config.chains,
        draws_per_chain=config.draws,
        acceptance_rate=float(accept_counts.sum())
        / (config.chains * config.draws),
        r_hat=r_hat,
        warnings=warnings,
    )


# block-maxima collection ------------------------------------------------------


def _metric_fn(problem, metric):
    if metric is None:
        return problem.cost
    if callable(metric):
        return metric
    return problem.metric(metric)


def _batched_metric(problem, theta, phi_rows, metric_fn):
    phi = np.ascontiguousarray(phi_rows.T)
    with np.errstate(all="ignore"):
        trace = problem.simulate(list(theta), phi)
        vals = np.atleast_1d(np.asarray(metric_fn(trace), dtype=float))
    vals[~np.isfinite(vals)] = np.inf
    return vals


def collect_worst_case_maxima(
    problem, theta, metric=None, n_block=1000, m_samples=1000, seed=0,
    lane_budget=20000,
):
    """Block maxima of N i.i.d. rollout metrics, M blocks (Algorithm for
    the worst-case law).

    Any trace-to-scalar function may stand in for the cost. Divergent
    rollouts are recorded as +inf and invalidate the run.
    """
    if n_block < 1 or m_samples < 1:
        raise ValueError("block size and sample size must be >= 1")
    theta = np.asarray(theta, dtype=float)
    fn = _metric_fn(problem, metric)
    block_keys = st.split(st.key_from_seed(seed), m_samples)
    maxima = np.empty(m_samples)
    blocks_per_batch = max(1, lane_budget // n_block)
    for start in range(0, m_samples, blocks_per_batch):
        stop = min(start + blocks_per_batch, m_samples)
        rows = np.concatenate(
            [
                problem.exogenous.sample_batch(block_keys[i], n_block)
                for i in range(start, stop)
            ]
        )
        vals = _batched_metric(problem, theta, rows, fn)
        maxima[start:stop] = vals.reshape(stop - start, n_block).max(axis=1)
    if np.any(np.isinf(maxima)):
        raise DivergentRolloutError(np.nonzero(np.isinf(maxima))[0])
    return maxima


def collect_sensitivity_maxima(
    problem, theta, n_block=1000, m_samples=500, seed=0, frozen_segments=(),
    lane_budget=20000,
):
    """Block maxima of finite-difference slopes |dJ| / ||dphi||.

    Each slope draws an independent pair (phi1, phi2); frozen segments are
    held at their nominal values on both draws and excluded from the norm.
    """
    if n_block < 1 or m_samples < 1:
        raise ValueError("block size and sample size must be >= 1")
    theta = np.asarray(theta, dtype=float)
    exo = problem.exogenous
    mask = exo.varying_mask(frozen_segments)
    if not mask.any():
        raise ValueError("all segments frozen; nothing varies")
    fn = problem.cost
    block_keys = st.split(st.key_from_seed(seed), m_samples)
    maxima = np.empty(m_samples)
    blocks_per_batch = max(1, lane_budget // (2 * n_block))
    for start in range(0, m_samples, blocks_per_batch):
        stop = min(start + blocks_per_batch, m_samples)
        pairs = np.concatenate(
            [
                exo.sample_batch(block_keys[i], 2 * n_block)
                for i in range(start, stop)
            ]
        )
        nb = stop - start
        phi1 = pairs[: nb * n_block].copy()
        phi2 = pairs[nb * n_block :].copy()
        exo.freeze(phi1, frozen_segments)
        exo.freeze(phi2, frozen_segments)
        norms = np.linalg.norm((phi1 - phi2)[:, mask], axis=1)
        for attempt in range(10):
            collided = norms == 0.0
            if not collided.any():
                break
            redraw_key = st.split(block_keys[start], attempt + 1)[-1]
            fresh = exo.sample_batch(redraw_key, 2 * int(collided.sum()))
            k = int(collided.sum())
            phi1[collided] = exo.freeze(fresh[:k].copy(), frozen_segments)
            phi2[collided] = exo.freeze(fresh[k:].copy(), frozen_segments)
            norms = np.linalg.norm((phi1 - phi2)[:, mask], axis=1)
        else:
            raise RuntimeError("phi pair collisions persisted after 10 redraws")
        j1 = _batched_metric(problem, theta, phi1, fn)
        j2 = _batched_metric(problem, theta, phi2, fn)
        slopes = np.abs(j1 - j2) / norms
        if np.any(~np.isfinite(slopes)):
            raise DivergentRolloutError(
                start + np.unique(np.nonzero(~np.isfinite(slopes))[0] // n_block)
            )
        maxima[start:stop] = slopes.reshape(nb, n_block).max(axis=1)
    return maxima


# certificates ------------------------------------------------------------------


@dataclass
class Certificate:
    """Worst-case-cost or sensitivity statement at a confidence level."""

    kind: str  # "worst-case-cost" | "sensitivity"
    confidence: float
    params: GevParams  # per-parameter marginal quantiles at the confidence
    bound_type: str  # "hard-bound" | "quantile-bound"
    value: float
    block_size: int = None
    sample_size: int = None
    seed: int = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "kind": self.kind,
            "confidence": self.confidence,
            "mu": self.params.mu,
            "sigma": self.params.sigma,
            "xi": self.params.xi,
            "bound_type": self.bound_type,
            "value": self.value,
            "block_size": self.block_size,
            "sample_size": self.sample_size,
            "seed": self.seed,
            "diagnostics": self.diagnostics,
        }


def params_at_confidence(posterior, level):
    """Per-parameter marginal posterior quantiles (the paper's literal rule)."""
    return posterior.quantile_params(level)


def certify(
    posterior, confidence=0.97, kind="worst-case-cost", block_size=None,
    sample_size=None, seed=None,
):
    """Extract a certificate from the fitted posterior.

    A negative shape quantile gives a hard bound mu* - sigma*/xi*; otherwise
    the bound is the GEV quantile of (mu*, sigma*, xi*) at the confidence
    level. Fit-quality diagnostics (Rhat, acceptance rate, consistency of a
    hard bound with the observed maxima) travel with the certificate.
    """
    star = params_at_confidence(posterior, confidence)
    observed_max = float(np.max(posterior.data))
    diagnostics = {
        "r_hat": [float(v) for v in posterior.r_hat],
        "acceptance_rate": posterior.acceptance_rate,
        "warnings": list(posterior.warnings),
        "observed_max": observed_max,
    }
    if star.xi < 0.0:
        bound_type = "hard-bound"
        value = star.mu - star.sigma / star.xi
        diagnostics["hard_bound_consistent"] = bool(value >= observed_max)
        if value < observed_max:
            diagnostics["warnings"].append(
                "hard bound below an observed block maximum; fit inconsistent"
            )
    else:
        bound_type = "quantile-bound"
        value = gev_quantile(star, confidence)
    return Certificate(
        kind=kind,
        confidence=confidence,
        params=star,
        bound_type=bound_type,
        value=float(value),
        block_size=block_size,
        sample_size=sample_size,
        seed=seed,
        diagnostics=diagnostics,
    )


# validation --------------------------------------------------------------------


@dataclass
class KsReport:
    direction: str  # "false-optimism" | "conservatism"
    statistic: float
    p_value: float
    reject_null: bool

    def to_dict(self):
        return {
            "direction": self.direction,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "reject_null": self.reject_null,
        }


def ks_one_sided(empirical, cdf, direction):
    """One-sided Kolmogorov-Smirnov test against a candidate CDF.

    direction="false-optimism" tests the null that the candidate (the 97%
    GEVD) under-estimates the data: rejection requires the empirical CDF to
    sit significantly above the candidate, i.e. D+ = max(F_hat - G) large.
    direction="conservatism" tests the null that the candidate (the 3%
    GEVD) over-estimates: rejection via D- = max(G - F_hat). The p-value is
    the asymptotic one-sided tail exp(-2 n D^2).
    """
    z = np.sort(np.asarray(empirical, dtype=float).ravel())
    n = z.size
    if n < 20:
        raise ValueError("KS test needs at least 20 empirical points")
    g = np.clip(np.asarray(cdf(z), dtype=float), 0.0, 1.0)
    if direction == "false-optimism":
        d = float((np.arange(1, n + 1) / n - g).max())
    elif direction == "conservatism":
        d = float((g - np.arange(0, n) / n).max())
    else:
        raise ValueError(f"unknown KS direction {direction!r}")
    d = max(d, 0.0)
    p = math.exp(-2.0 * n * d * d)
    return KsReport(
        direction=direction, statistic=d, p_value=p, reject_null=p < 0.05
    )


def cantelli_diagnostic(costs, j_max, alpha):
    """Empirical tail probability Pr(J >= alpha J_max) vs the Cantelli bound.

    Diagnostic only; the bound is Var / (Var + (alpha J_max - E[J])^2) and
    degenerates to 1 when alpha J_max does not exceed the mean.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    costs = np.asarray(costs, dtype=float).ravel()
    thresh = alpha * j_max
    mean = float(costs.mean())
    var = float(costs.var(ddof=1)) if costs.size > 1 else 0.0
    empirical = float(np.mean(costs >= thresh))
    if thresh <= mean:
        return empirical, 1.0
    bound = var / (var + (thresh - mean) ** 2)
    return empirical, bound
