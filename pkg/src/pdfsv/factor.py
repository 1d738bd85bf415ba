"""
Factor block: loadings under the lower-triangular / positive-diagonal
identification, the idiosyncratic scale sigma_lambda, per-period factor
draws and Bai-Ng ICp1 selection of the number of factors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import special, stats

from .model import FactorPath, LoadingMatrix, ModelError, PanelDataset, ParameterState, RegressionCoeffs

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LoadingPrior:
    """
    Free loadings are independent N(prior_mean, c_prior_var), the diagonal
    ones truncated to be positive. sigma_lambda ~ IG(nu_lambda / 2,
    nu_lambda * s2_lambda / 2). ``t_dof`` is the degrees of freedom of the
    refresh proposal, ``newton_steps`` the number of mode-finding steps.
    """

    c_prior_var: float = 0.1
    prior_mean: float = 0.9
    nu_lambda: float = 4.0
    s2_lambda: float = 1.0
    delta_lambda: float = 0.0
    t_dof: float = 10.0
    newton_steps: int = 5
    mh_refresh: bool = True

    def __post_init__(self):
        for name in ("c_prior_var", "nu_lambda", "s2_lambda", "t_dof"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")
        if self.delta_lambda < 0:
            raise ModelError("delta_lambda must be nonnegative")
        if self.newton_steps < 1:
            raise ModelError("newton_steps must be at least 1")


@dataclass(frozen=True)
class TProposal:
    location: np.ndarray
    scale: np.ndarray
    dof: float

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.location, float))
        sc = np.atleast_2d(np.asarray(self.scale, float))
        if sc.shape != (loc.size, loc.size):
            raise ModelError("t proposal scale must be d x d")
        try:
            np.linalg.cholesky(sc)
        except np.linalg.LinAlgError:
            raise ModelError("t proposal scale is not positive definite") from None
        if not self.dof > 0:
            raise ModelError("t proposal dof must be positive")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "scale", sc)

    @cached_property
    def dist(self):
        return stats.multivariate_t(loc=self.location, shape=self.scale, df=self.dof)

    def logpdf(self, x) -> float:
        return float(self.dist.logpdf(np.atleast_1d(x)))

    def rvs(self, rng) -> np.ndarray:
        return np.atleast_1d(self.dist.rvs(random_state=rng))


def n_free(i: int, n_factors: int) -> int:
    """Number of free loadings in row i (0-based)."""
    return min(i + 1, n_factors)


def _mean_residual(dataset: PanelDataset, state: ParameterState) -> np.ndarray:
    """r_it - beta_i' x_it (the part left for factors and noise)."""
    return dataset.returns - dataset.mean_part(state.beta)


def loading_conditional(i, dataset, state, prior: LoadingPrior):
    """
    Gaussian full conditional (mean, cov) of the free loadings of row i
    given the factor path, before any truncation.
    """
    p = state.lam.shape[1]
    d = n_free(i, p)
    y = _mean_residual(dataset, state)[i]
    w = np.exp(-state.h[i])
    F = state.f[:d]  # d x T
    prec = (F * w) @ F.T + np.eye(d) / prior.c_prior_var
    rhs = F @ (w * y) + prior.prior_mean / prior.c_prior_var
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    return cov @ rhs, cov


def _positive_normal(mean, sd, rng):
    """Exact draw from N(mean, sd^2) truncated to (0, inf)."""
    a = -mean / sd
    tail = special.ndtr(-a)
    if tail > 1e-12:
        # inverse CDF on the upper tail, P(Z > z) = u P(Z > a)
        z = -special.ndtri(rng.random() * tail)
    else:
        z = stats.truncnorm.rvs(a, np.inf, random_state=rng)
    return max(float(mean + sd * max(z, a)), np.finfo(float).tiny)


def _draw_gibbs_row(i, mean, cov, p, rng):
    d = mean.size
    row = np.zeros(p)
    if i >= p:
        row[:d] = mean + np.linalg.cholesky(cov) @ rng.standard_normal(d)
        return row
    # diagonal element is last free one: draw it from its positive-truncated
    # marginal, then the others from their conditional normal given it
    lam_ii = _positive_normal(mean[-1], np.sqrt(cov[-1, -1]), rng)
    row[d - 1] = lam_ii
    if d > 1:
        c12 = cov[:-1, -1]
        cm = mean[:-1] + c12 * (lam_ii - mean[-1]) / cov[-1, -1]
        cc = cov[:-1, :-1] - np.outer(c12, c12) / cov[-1, -1]
        cc = 0.5 * (cc + cc.T)
        row[: d - 1] = cm + np.linalg.cholesky(cc) @ rng.standard_normal(d - 1)
    return row


class MarginalRowLikelihood:
    """
    Log-likelihood of the whole panel with the factors integrated out,
    sum_t log N(r_t - beta' x_t | 0, Lambda Q_t Lambda' + Sigma_t), as a
    function of the free loadings of a single row i. Evaluations are
    batched over candidate rows and use the Woodbury identity so only
    p x p systems are solved.
    """

    def __init__(self, i, dataset, state):
        self.i = i
        lam = np.array(state.lam, dtype=float)
        n, p = lam.shape
        self.p = p
        self.d = n_free(i, p)
        r = _mean_residual(dataset, state)  # N x T
        winv = np.exp(-state.h)  # Sigma_t^{-1} diagonals
        keep = np.arange(n) != i
        lo, wo, ro = lam[keep], winv[keep], r[keep]
        # contributions of all rows but i
        self.G0 = np.einsum("nj,nt,nk->tjk", lo, wo, lo) + np.einsum(
            "jk,jt->tjk", np.eye(p), np.exp(-state.q)
        )
        self.b0 = np.einsum("nj,nt,nt->tj", lo, wo, ro)
        self.w = winv[i]
        self.r = r[i]
        self.const = -0.5 * (
            n * r.shape[1] * LOG_2PI
            + state.h.sum()
            + state.q.sum()
            + np.sum(wo * ro * ro)
            + np.sum(self.w * self.r * self.r)
        )

    def _full(self, free):
        out = np.zeros(free.shape[:-1] + (self.p,))
        out[..., : self.d] = free
        return out

    def evaluate(self, free, derivatives=False):
        """
        Parameters
        ----------
        free : (m, d) candidate free loadings.

        Returns
        -------
        loglik (m,), and with ``derivatives`` also gradient (m, d) and
        Hessian (m, d, d) with respect to the free loadings.
        """
        free = np.atleast_2d(free)
        lam = self._full(free)  # m x p
        w, r = self.w, self.r
        G = self.G0[None] + w[None, :, None, None] * lam[:, None, :, None] * lam[:, None, None, :]
        b = self.b0[None] + (w * r)[None, :, None] * lam[:, None, :]
        L = np.linalg.cholesky(G)
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        Ginv = np.linalg.inv(G)
        m = np.einsum("mtjk,mtk->mtj", Ginv, b)
        quad = np.einsum("mtj,mtj->mt", b, m)
        ll = self.const - 0.5 * np.sum(logdet - quad, axis=1)
        if not derivatives:
            return ll
        d = self.d
        u = np.einsum("mtjk,mk->mtj", Ginv, lam)
        e = r[None, :] - np.einsum("mtj,mj->mt", m, lam)
        grad = np.einsum("t,mtj->mj", w, -u + e[..., None] * m)
        lu = np.einsum("mj,mtj->mt", lam, u)
        # Jacobians of u, m and e with respect to lambda
        Ju = Ginv * (1.0 - w[None, :] * lu)[..., None, None] - w[None, :, None, None] * u[..., :, None] * u[..., None, :]
        Jm = Ginv * (w[None, :] * e)[..., None, None] - w[None, :, None, None] * u[..., :, None] * m[..., None, :]
        Je = -(m + np.einsum("mj,mtjk->mtk", lam, Jm))
        H = np.einsum(
            "t,mtjk->mjk",
            w,
            -Ju + m[..., :, None] * Je[..., None, :] + e[..., None, None] * Jm,
        )
        H = 0.5 * (H + np.swapaxes(H, -1, -2))
        return ll, grad[:, :d], H[:, :d, :d]


def _log_prior_row(free, i, p, prior):
    free = np.atleast_2d(free)
    lp = -0.5 * np.sum((free - prior.prior_mean) ** 2, axis=1) / prior.c_prior_var
    if i < p:
        lp = np.where(free[:, -1] > 0, lp, -np.inf)
    return lp


def loading_t_proposal(lik: MarginalRowLikelihood, start, prior: LoadingPrior, scale_hint=None):
    """
    Newton iterations on log prior + marginal log-likelihood from ``start``.
    Returns a TProposal at the final point with scale (-Hessian)^-1, or
    None when the Hessian is not negative definite.
    """
    i, p, d = lik.i, lik.p, lik.d
    x = np.asarray(start, float).copy()
    prior_hess = -np.eye(d) / prior.c_prior_var

    def local(x):
        ll, g, H = lik.evaluate(x[None], derivatives=True)
        obj = ll[0] + _log_prior_row(x, i, p, prior)[0]
        return obj, g[0] - (x - prior.prior_mean) / prior.c_prior_var, H[0] + prior_hess

    obj, g, H = local(x)
    for _ in range(prior.newton_steps):
        try:
            np.linalg.cholesky(-H)
        except np.linalg.LinAlgError:
            return None
        step = np.linalg.solve(-H, g)
        if g @ step < 1e-8:
            break
        if scale_hint is not None:
            # keep steps within a few conditional sds
            lim = 5.0 * np.asarray(scale_hint)
            step = np.clip(step, -lim, lim)
        moved = False
        for _ in range(20):
            cand = x + step
            val, gc, Hc = local(cand)
            if np.isfinite(val) and val >= obj - 1e-10:
                x, obj, g, H, moved = cand, val, gc, Hc, True
                break
            step = step / 2.0
        if not moved:
            break
    try:
        np.linalg.cholesky(-H)
        scale = np.linalg.inv(-H)
        return TProposal(location=x, scale=0.5 * (scale + scale.T), dof=prior.t_dof)
    except (np.linalg.LinAlgError, ModelError):
        return None


def mh_refresh_row(i, dataset, state, prior: LoadingPrior, rng, scale_hint=None):
    """
    Independence M-H update of row i targeting the factor-marginalised
    posterior. Returns (row, accepted) with ``accepted`` None when the
    proposal could not be built.
    """
    lam = state.lam
    p = lam.shape[1]
    d = n_free(i, p)
    lik = MarginalRowLikelihood(i, dataset, state)
    current = lam[i, :d].copy()
    proposal = loading_t_proposal(lik, current, prior, scale_hint)
    if proposal is None:
        return lam[i].copy(), None
    cand = proposal.rvs(rng)
    u = rng.random()
    lp = _log_prior_row(np.vstack([cand, current]), i, p, prior)
    if not np.isfinite(lp[0]):
        return lam[i].copy(), False
    ll = lik.evaluate(np.vstack([cand, current]))
    log_ratio = (ll[0] + lp[0] - ll[1] - lp[1]) + proposal.logpdf(current) - proposal.logpdf(cand)
    if np.log(u) < log_ratio:
        row = np.zeros(p)
        row[:d] = cand
        return row, True
    return lam[i].copy(), False


def sample_loading_row(i, dataset, state, prior: LoadingPrior = LoadingPrior(), rng=None, mode="gibbs"):
    """
    Draw row i of the loading matrix.

    ``mode="gibbs"`` draws from the Gaussian full conditional given the
    factors (exact positive truncation of lambda_ii for i < p);
    ``mode="mh"`` applies one refresh step targeting the posterior with the
    factors integrated out.
    """
    rng = np.random.default_rng(rng)
    p = state.lam.shape[1]
    if not 0 <= i < state.lam.shape[0]:
        raise ModelError(f"row index {i} out of range")
    if mode == "gibbs":
        mean, cov = loading_conditional(i, dataset, state, prior)
        return _draw_gibbs_row(i, mean, cov, p, rng)
    if mode == "mh":
        return mh_refresh_row(i, dataset, state, prior, rng)[0]
    raise ValueError(f"unknown mode {mode!r}")


def sample_loadings(dataset, state, prior: LoadingPrior, rng):
    """
    Gibbs pass over all rows given f, then (optionally) an M-H refresh pass
    with f integrated out. The caller must redraw f afterwards.

    Returns
    -------
    LoadingMatrix, n_accepted, n_attempted
    """
    lam = np.array(state.lam, dtype=float)
    n, p = lam.shape
    if p == 0:
        return LoadingMatrix(lam), 0, 0
    sds = []
    for i in range(n):
        mean, cov = loading_conditional(i, dataset, state.evolve(loadings=LoadingMatrix(lam)), prior)
        lam[i] = _draw_gibbs_row(i, mean, cov, p, rng)
        sds.append(np.sqrt(np.diag(cov)))
    accepted = attempted = 0
    if prior.mh_refresh:
        for i in range(n):
            cur = state.evolve(loadings=LoadingMatrix(lam))
            row, ok = mh_refresh_row(i, dataset, cur, prior, rng, scale_hint=sds[i])
            if ok is None:
                continue
            attempted += 1
            accepted += int(ok)
            lam[i] = row
    return LoadingMatrix(lam), accepted, attempted


def sigma_lambda_posterior(delta_lambda: float, n_periods: int, prior: LoadingPrior):
    """(shape, scale) of the inverse-Gamma conditional of sigma_lambda."""
    scale = (prior.nu_lambda * prior.s2_lambda + prior.delta_lambda + delta_lambda) / 2.0
    if not scale > 0:
        raise ModelError("nonpositive inverse-Gamma scale for sigma_lambda")
    return (prior.nu_lambda + n_periods) / 2.0, scale


def factor_residual_delta(dataset, state) -> float:
    """Sum over t of the cross-sectional mean of squared whitened residuals."""
    e = (_mean_residual(dataset, state) - state.lam @ state.f) * np.exp(-0.5 * state.h)
    return float(np.sum(np.mean(e * e, axis=0)))


def sample_sigma_lambda(dataset, state, prior: LoadingPrior = LoadingPrior(), rng=None) -> float:
    """sigma_lambda ~ IG((nu + T) / 2, (nu s^2 + delta_lambda) / 2)."""
    rng = np.random.default_rng(rng)
    if dataset is None:
        shape, scale = sigma_lambda_posterior(0.0, 0, prior)
    else:
        shape, scale = sigma_lambda_posterior(
            factor_residual_delta(dataset, state), dataset.n_periods, prior
        )
    return float(scale / rng.gamma(shape, 1.0))


def factor_conditional(dataset, state, periods=None):
    """
    Gaussian conditional moments of f_t given everything else:
    G_t = Q_t^-1 + Lambda' Sigma_t^-1 Lambda, cov = G_t^-1,
    mean = G_t^-1 Lambda' Sigma_t^-1 (r_t - beta' x_t).

    Returns mean (T', p) and precision G (T', p, p).
    """
    lam = state.lam
    p = lam.shape[1]
    r = _mean_residual(dataset, state)
    winv = np.exp(-state.h)
    qinv = np.exp(-state.q)
    if periods is not None:
        r, winv, qinv = r[:, periods], winv[:, periods], qinv[:, periods]
    G = np.einsum("nj,nt,nk->tjk", lam, winv, lam)
    G[:, np.arange(p), np.arange(p)] += qinv.T
    b = np.einsum("nj,nt,nt->tj", lam, winv, r)
    mean = np.linalg.solve(G, b[..., None])[..., 0]
    return mean, G


def _draw_from_precision(mean, G, rng):
    L = np.linalg.cholesky(G)
    z = rng.standard_normal(mean.shape)
    # L' x = z gives x ~ N(0, G^-1)
    return mean + np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]


def sample_factors_t(t: int, dataset, state, rng=None) -> np.ndarray:
    """Draw f_t from its Gaussian full conditional."""
    rng = np.random.default_rng(rng)
    mean, G = factor_conditional(dataset, state, periods=[t])
    return _draw_from_precision(mean, G, rng)[0]


def sample_factors(dataset, state, rng=None) -> FactorPath:
    """Draw every f_t (conditionally independent across t) in one pass."""
    rng = np.random.default_rng(rng)
    if state.lam.shape[1] == 0:
        return FactorPath(np.zeros((0, dataset.n_periods)))
    mean, G = factor_conditional(dataset, state)
    return FactorPath(_draw_from_precision(mean, G, rng).T)


def icp_values(dataset_or_returns, p_max: int):
    """
    ICp1(k) = log V(k) + k (N + T) / (N T) log(N T / (N + T)) for k = 0..p_max,
    where V(k) is the mean squared residual after removing k principal
    components from the column-demeaned T x N return matrix.

    Returns (icp, V) arrays of length p_max + 1.
    """
    r = getattr(dataset_or_returns, "returns", dataset_or_returns)
    r = np.asarray(r, float)
    n, t = r.shape
    if not 0 <= p_max < min(n, t):
        raise ModelError(f"p_max must satisfy 0 <= p_max < min(N, T) = {min(n, t)}")
    X = (r - r.mean(axis=1, keepdims=True)).T  # T x N
    gram = X.T @ X if n <= t else X @ X.T
    eig = np.sort(np.linalg.eigvalsh(gram))[::-1]
    eig = np.clip(eig, 0.0, None)
    total = float(np.sum(X * X))
    if not total > 0:
        raise ModelError("degenerate return matrix: zero variation after demeaning")
    removed = np.concatenate([[0.0], np.cumsum(eig[:p_max])])
    V = np.clip(total - removed, 0.0, None) / (n * t)
    ks = np.arange(p_max + 1)
    penalty = ks * (n + t) / (n * t) * np.log(n * t / (n + t))
    with np.errstate(divide="ignore"):
        logv = np.where(V > 1e-12 * V[0], np.log(np.maximum(V, 1e-300)), -np.inf)
    return logv + penalty, V


def select_num_factors_icp(dataset, p_max: int) -> int:
    """Number of factors minimising ICp1; exact fits resolve to the smallest k."""
    icp, _ = icp_values(dataset, p_max)
    return int(np.argmin(icp))


def intercept_column(dataset) -> int:
    """Index of an all-ones covariate, or -1."""
    x = dataset.covariates
    for a in range(x.shape[2]):
        if np.all(x[:, :, a] == 1.0):
            return a
    return -1


def sample_factor_shift(dataset, state, rng=None, mu_beta=None, v_beta_inv=None):
    """
    Joint translation move f_j -> f_j + c, beta_i0 -> beta_i0 - lambda_ij c
    (beta_i0 the intercept coefficient), which leaves the likelihood
    unchanged. c is drawn exactly from its Gaussian conditional under the
    factor prior N(0, exp(q_jt)) and the hierarchical beta prior, one factor
    at a time. Returns the state unchanged when there is no intercept.
    """
    rng = np.random.default_rng(rng)
    a = intercept_column(dataset)
    p = state.lam.shape[1]
    if a < 0 or p == 0:
        return state
    mu = state.coeffs.mu_beta if mu_beta is None else mu_beta
    P = state.coeffs.v_beta_inv if v_beta_inv is None else v_beta_inv
    beta = np.array(state.beta, dtype=float)
    f = np.array(state.f, dtype=float)
    lam = state.lam
    for j in range(p):
        qinv = np.exp(-state.q[j])
        col = lam[:, j]
        dev = (beta - mu) @ P[:, a]
        prec = qinv.sum() + P[a, a] * np.dot(col, col)
        mean = (-np.dot(qinv, f[j]) + np.dot(col, dev)) / prec
        c = mean + rng.standard_normal() / np.sqrt(prec)
        f[j] += c
        beta[:, a] -= col * c
    coeffs = RegressionCoeffs(beta, state.coeffs.mu_beta, state.coeffs.v_beta_inv)
    return state.evolve(coeffs=coeffs, factors=FactorPath(f))
