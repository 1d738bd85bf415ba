"""
Regression block: coefficients beta_i, their hierarchical mean and
precision, the error-accuracy scales (sigma^2, vartheta, delta_sigma) and a
Metropolis-Hastings update of the stacked AR slopes with an independence
multivariate-t proposal.

Residuals entering the conjugate updates are pre-whitened by the current
stochastic-volatility scale exp(h_it / 2), so sigma^2 / vartheta_i act as a
common multiplicative correction to the SV variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .model import ModelError, PanelDataset, ParameterState, RegressionCoeffs


@dataclass(frozen=True)
class RegressionPrior:
    """
    Hyperparameters of the regression block.

    beta_i ~ N(mu_beta, V_beta), mu_beta ~ N(mu_beta_prior_mean, mu_beta_prior_cov),
    V_beta^{-1} ~ Wishart(wishart_dof, wishart_scale) (mean dof * scale),
    sigma^2 | delta_sigma ~ IG(nu_sigma / 2, delta_sigma / 2),
    delta_sigma ~ G(nu_sigma0 / 2, rate delta_sigma0 / 2),
    vartheta_i ~ G(nu_vartheta / 2, rate nu_vartheta / 2).
    """

    mu_beta_prior_mean: np.ndarray
    mu_beta_prior_cov: np.ndarray
    wishart_dof: float
    wishart_scale: np.ndarray
    nu_sigma: float = 5.0
    delta_sigma0: float = 5.0
    nu_sigma0: float = 5.0
    nu_vartheta: float = 10.0
    t_proposal_dof: float = 10.0

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mu_beta_prior_mean, float))
        k = m.shape[0]
        object.__setattr__(self, "mu_beta_prior_mean", m)
        for name in ("mu_beta_prior_cov", "wishart_scale"):
            a = np.asarray(getattr(self, name), float)
            if a.shape != (k, k):
                raise ModelError(f"{name} must be {k} x {k}")
            if not np.allclose(a, a.T) or np.linalg.eigvalsh(a).min() <= 0:
                raise ModelError(f"{name} must be symmetric positive definite")
            object.__setattr__(self, name, a)
        if self.wishart_dof < k:
            raise ModelError(f"wishart_dof must be at least k = {k}")
        for name in ("nu_sigma", "delta_sigma0", "nu_sigma0", "nu_vartheta"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")
        if not self.t_proposal_dof > 1:
            raise ModelError("t_proposal_dof must exceed 1")

    @property
    def k(self) -> int:
        return self.mu_beta_prior_mean.shape[0]

    @classmethod
    def default(cls, k: int, mean: float = 0.02, var: float = 0.04, **kw):
        """Prior centred on beta_ij ~ N(mean, var) with a weak Wishart on the precision."""
        dof = k + 2.0
        return cls(
            mu_beta_prior_mean=np.full(k, mean),
            mu_beta_prior_cov=var * np.eye(k),
            wishart_dof=dof,
            wishart_scale=np.eye(k) / (dof * var),
            **kw,
        )


def whitened_design(dataset: PanelDataset, state: ParameterState):
    """(y, X) with the factor part removed and rows scaled by exp(-h/2)."""
    w = np.exp(-0.5 * state.h)
    y = dataset.returns
    if state.lam.shape[1] > 0:
        y = y - state.lam @ state.f
    return y * w, dataset.covariates * w[:, :, None]


def beta_posterior(X, y, M, mu, v_inv):
    """
    Conjugate moments for stacked individuals.

    Parameters
    ----------
    X : (N, T, k), y : (N, T), M : (N,) error accuracy,
    mu : (k,), v_inv : (k, k)

    Returns
    -------
    mean (N, k), cov (N, k, k)
    """
    xtx = np.einsum("ntk,ntl->nkl", X, X)
    xty = np.einsum("ntk,nt->nk", X, y)
    prec = M[:, None, None] * xtx + v_inv
    rhs = M[:, None] * xty + v_inv @ mu
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise ModelError("singular posterior precision for beta (degenerate covariates?)") from None
    eye = np.broadcast_to(np.eye(prec.shape[-1]), prec.shape)
    linv = np.linalg.solve(chol, eye)
    cov = np.einsum("nji,njk->nik", linv, linv)
    mean = np.einsum("nkl,nl->nk", cov, rhs)
    return mean, cov


def sample_beta_block(dataset: PanelDataset, state: ParameterState, prior: RegressionPrior, rng=None):
    """Draw every beta_i from N(V(M X'y + V_b^-1 mu_b), V), V = (M X'X + V_b^-1)^-1."""
    rng = np.random.default_rng(rng)
    coeffs = state.coeffs
    mu = coeffs.mu_beta if coeffs.mu_beta is not None else prior.mu_beta_prior_mean
    v_inv = coeffs.v_beta_inv if coeffs.v_beta_inv is not None else prior.wishart_dof * prior.wishart_scale
    y, X = whitened_design(dataset, state)
    M = state.scales.vartheta / state.scales.sigma2_err
    mean, cov = beta_posterior(X, y, M, mu, v_inv)
    chol = np.linalg.cholesky(cov)
    z = rng.standard_normal(mean.shape)
    beta = mean + np.einsum("nkl,nl->nk", chol, z)
    return RegressionCoeffs(beta=beta, mu_beta=mu, v_beta_inv=v_inv)


def mu_beta_posterior(beta, v_inv, prior_mean, prior_cov_inv):
    """Normal full conditional of mu_beta: (cov, mean)."""
    n = beta.shape[0]
    prec = prior_cov_inv + n * v_inv
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (prior_cov_inv @ prior_mean + v_inv @ beta.sum(axis=0))
    return mean, cov


def sample_beta_hyperparams(coeffs: RegressionCoeffs, prior: RegressionPrior, rng=None):
    """
    Gibbs update of (mu_beta, V_beta^-1) given the current beta rows:
    mu_beta from its normal conditional, then V_beta^-1 from
    Wishart(dof + N, (scale^-1 + sum (beta_i - mu)(beta_i - mu)')^-1).
    """
    rng = np.random.default_rng(rng)
    beta = np.atleast_2d(coeffs.beta)
    n, k = beta.shape
    v_inv = coeffs.v_beta_inv if coeffs.v_beta_inv is not None else prior.wishart_dof * prior.wishart_scale
    prior_cov_inv = np.linalg.inv(prior.mu_beta_prior_cov)
    mean, cov = mu_beta_posterior(beta, v_inv, prior.mu_beta_prior_mean, prior_cov_inv)
    mu = rng.multivariate_normal(mean, cov, method="cholesky")
    dev = beta - mu
    scatter = dev.T @ dev
    post_scale_inv = np.linalg.inv(prior.wishart_scale) + scatter
    try:
        post_scale = linalg.cho_solve(linalg.cho_factor(post_scale_inv), np.eye(k))
    except linalg.LinAlgError:
        raise ModelError("accumulated Wishart scale is not positive definite") from None
    post_scale = 0.5 * (post_scale + post_scale.T)
    v_inv_new = stats.wishart.rvs(df=prior.wishart_dof + n, scale=post_scale, random_state=rng)
    v_inv_new = np.atleast_2d(v_inv_new)
    return mu, v_inv_new


def compute_nu_delta(dataset: PanelDataset, state: ParameterState):
    """
    Quadratic forms of the whitened residuals e_i:
    nu_i = e_i'e_i / sigma_i^2 and delta = sum_i vartheta_i e_i'e_i.
    """
    y, X = whitened_design(dataset, state)
    e = y - np.einsum("ntk,nk->nt", X, state.beta)
    rss = np.einsum("nt,nt->n", e, e)
    nu = rss / state.scales.sigma2_err
    delta = float(np.dot(state.scales.vartheta, rss))
    return nu, delta


def sample_vartheta(nu, prior: RegressionPrior, rng=None, n_obs: int = 1):
    """vartheta_i ~ G((nu_vartheta + n_obs) / 2, rate (nu_vartheta + nu_i) / 2)."""
    rng = np.random.default_rng(rng)
    nu = np.atleast_1d(np.asarray(nu, float))
    rate = (prior.nu_vartheta + nu) / 2.0
    if np.any(~(rate > 0)):
        raise ModelError("nonpositive Gamma rate for vartheta")
    shape = (prior.nu_vartheta + n_obs) / 2.0
    return rng.gamma(shape, 1.0 / rate)


def sample_sigma_err(
    delta: float,
    prior: RegressionPrior,
    rng=None,
    n_obs: int = 1,
    delta_sigma: float = 1.0,
    n_individuals: int = 1,
):
    """
    Common error-scale draw sigma^2 ~ IG((nu_sigma + n_obs) / 2, (delta_sigma + delta) / 2),
    returned broadcast to length ``n_individuals``. ``n_obs`` counts every
    residual entering ``delta`` (N * T in the sampler).
    """
    rng = np.random.default_rng(rng)
    scale = (delta_sigma + delta) / 2.0
    if not scale > 0:
        raise ModelError("nonpositive inverse-Gamma scale for sigma^2")
    shape = (prior.nu_sigma + n_obs) / 2.0
    s2 = scale / rng.gamma(shape, 1.0)
    return np.full(n_individuals, s2)


def sample_delta_sigma(sigma2, prior: RegressionPrior, rng=None) -> float:
    """Gamma-Gamma update of delta_sigma given the distinct sigma^2 values."""
    rng = np.random.default_rng(rng)
    s2 = np.unique(np.atleast_1d(np.asarray(sigma2, float)))
    shape = (prior.nu_sigma0 + len(s2) * prior.nu_sigma) / 2.0
    rate = (prior.delta_sigma0 + np.sum(1.0 / s2)) / 2.0
    return float(rng.gamma(shape, 1.0 / rate))


def mh_independence_t(current, log_target, loc, scale, dof, rng=None):
    """
    One independence Metropolis-Hastings step with a multivariate-t proposal.

    Returns
    -------
    value : ndarray
    accepted : bool
    """
    rng = np.random.default_rng(rng)
    current = np.atleast_1d(np.asarray(current, float))
    loc = np.atleast_1d(np.asarray(loc, float))
    scale = np.atleast_2d(np.asarray(scale, float))
    try:
        np.linalg.cholesky(scale)
    except np.linalg.LinAlgError:
        raise ModelError("proposal scale matrix is not positive definite") from None
    prop = stats.multivariate_t(loc=loc, shape=scale, df=dof)
    cand = np.atleast_1d(prop.rvs(random_state=rng))
    lt_cand = log_target(cand)
    if not np.isfinite(lt_cand):
        # still consume the uniform so the stream does not depend on the outcome
        rng.random()
        return current, False
    log_ratio = lt_cand - log_target(current) + prop.logpdf(current) - prop.logpdf(cand)
    if np.log(rng.random()) < log_ratio:
        return cand, True
    return current, False


def stationary_log_prior(phi) -> float:
    """Uniform prior on the stationary box |phi_j| < 1."""
    return 0.0 if np.all(np.abs(phi) < 1.0) else -np.inf


def sample_phi_mh(state: ParameterState, proposal, rng=None, log_prior=stationary_log_prior):
    """
    Metropolis-Hastings update of the stacked AR slopes (alpha_i1, phi_j1).

    The target is ``log_prior`` times the Gaussian AR(1) likelihood of the
    current h and q paths given intercepts and innovation variances.
    ``proposal`` is ``(phi_hat, V_phi, nu_phi)``.
    """
    phi_hat, v_phi, nu_phi = proposal
    if not nu_phi > 1:
        raise ModelError("nu_phi must exceed 1")
    intercept, slope, var = state.volcoeffs.stacked()
    paths = state.logvols.stacked()
    x = paths[:, :-1]
    y = paths[:, 1:] - intercept[:, None]

    def log_target(phi):
        lp = log_prior(phi)
        if not np.isfinite(lp):
            return -np.inf
        resid = y - phi[:, None] * x
        return lp - 0.5 * np.sum(resid**2 / var[:, None])

    return mh_independence_t(slope, log_target, phi_hat, v_phi, nu_phi, rng)
