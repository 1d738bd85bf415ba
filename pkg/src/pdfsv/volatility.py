"""
Volatility block: auxiliary-mixture linearisation of the squared residuals,
Kalman forward filtering over the stacked (N + p) log-volatility state and
backward sampling of the whole path, plus conjugate draws of the AR(1)
coefficients.

The measurement equation after linearisation is

    z_it = log(u_it^2 + offset_i) = h_it + m_{s_it} + e_it,  e_it ~ N(0, v_{s_it})

with s_it the mixture indicator; the state is h_t = a0 + a1 h_{t-1} + nu_t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .model import LogVolPaths, ModelError, PanelDataset, ParameterState, VolCoeffs, residuals

# log chi^2_1 mean and variance: psi(1/2) + log 2 and pi^2 / 2
LOG_CHI2_MEAN = float(special.digamma(0.5) + np.log(2.0))
LOG_CHI2_VAR = float(np.pi**2 / 2.0)


class VolatilityError(ModelError):
    pass


@dataclass(frozen=True)
class MixtureTable:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, not 1")
        if np.any(np.asarray(self.variances) <= 0):
            raise ValueError("mixture variances must be positive")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def variance(self) -> float:
        m = self.mean()
        return float(np.dot(self.weights, self.variances + self.means**2) - m**2)

    def cdf(self, x):
        x = np.asarray(x, float)[..., None]
        return np.sum(self.weights * special.ndtr((x - self.means) / np.sqrt(self.variances)), axis=-1)

    def logpdf(self, x):
        x = np.asarray(x, float)[..., None]
        lp = (
            np.log(self.weights)
            - 0.5 * np.log(2 * np.pi * self.variances)
            - 0.5 * (x - self.means) ** 2 / self.variances
        )
        return special.logsumexp(lp, axis=-1)


# Seven-component normal mixture for log chi^2_1 (Kim, Shephard & Chib 1998).
# Published means are for log chi^2_1 + 1.2704, hence the shift.
KSC_TABLE = MixtureTable(
    weights=np.array([0.00730, 0.10556, 0.00002, 0.04395, 0.34001, 0.24566, 0.25750]),
    means=np.array([-10.12999, -3.97281, -8.56686, 2.77786, 0.61942, 1.79518, -1.08819]) - 1.2704,
    variances=np.array([5.79596, 2.61369, 5.17950, 0.16735, 0.64009, 0.34023, 1.26261]),
)


@dataclass(frozen=True)
class StateSpaceView:
    """
    Linear Gaussian view of the stacked log-volatilities.

    ``z``, ``c`` and ``sigma_e`` are (S, T) with S = N + p; the first
    ``n_individuals`` rows are idiosyncratic, the remaining rows are factor
    log-volatilities. ``alpha`` is (S, 2) holding (intercept, slope) of each
    state's AR(1) evolution and ``sigma_nu`` its innovation variance.
    """

    z: np.ndarray
    c: np.ndarray
    sigma_e: np.ndarray
    alpha: np.ndarray
    sigma_nu: np.ndarray
    n_individuals: int = None

    def __post_init__(self):
        s, t = np.shape(self.z)
        if np.shape(self.c) != (s, t) or np.shape(self.sigma_e) != (s, t):
            raise ModelError("z, c and sigma_e must share shape (S, T)")
        if np.shape(self.alpha) != (s, 2) or np.shape(self.sigma_nu) != (s,):
            raise ModelError("alpha must be (S, 2) and sigma_nu (S,)")
        if self.n_individuals is None:
            object.__setattr__(self, "n_individuals", s)

    @property
    def n_states(self) -> int:
        return self.z.shape[0]

    @property
    def n_periods(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class FilterMoments:
    """
    Filtered moments of h_t given z_1..z_t.

    ``m`` is (S, T). ``D`` is (T, S, S) for the dense filter, or (S, T)
    marginal variances when ``diagonal`` is set (independent univariate
    filters).
    """

    m: np.ndarray
    D: np.ndarray
    diagonal: bool = False

    def cov(self, t: int) -> np.ndarray:
        if self.diagonal:
            return np.diag(self.D[:, t])
        return self.D[t]


def log_squared(x: np.ndarray, offset_scale: float = 1e-6) -> np.ndarray:
    """log(x^2 + offset) row-wise, offset = offset_scale * per-row sample variance."""
    x = np.atleast_2d(np.asarray(x, float))
    var = x.var(axis=1, keepdims=True)
    # all-zero rows still need a positive offset
    off = offset_scale * np.where(var > 0, var, 1.0)
    return np.log(x**2 + off)


def linearized_observations(dataset: PanelDataset, state: ParameterState, offset_scale=1e-6):
    """Stacked z of shape (N + p, T): log squared residuals then log squared factors."""
    u = residuals(dataset, state)
    z = log_squared(u, offset_scale)
    if state.f.shape[0] > 0:
        z = np.vstack([z, log_squared(state.f, offset_scale)])
    return z


def mixture_probabilities(resid: np.ndarray, table: MixtureTable = KSC_TABLE) -> np.ndarray:
    """Posterior component probabilities, shape resid.shape + (n_components,)."""
    e = np.asarray(resid, float)[..., None]
    lp = (
        np.log(table.weights)
        - 0.5 * np.log(table.variances)
        - 0.5 * (e - table.means) ** 2 / table.variances
    )
    lp -= lp.max(axis=-1, keepdims=True)
    p = np.exp(lp)
    return p / p.sum(axis=-1, keepdims=True)


def sample_mixture_indicators(z_minus_h, table: MixtureTable = KSC_TABLE, rng=None) -> np.ndarray:
    """Draw one indicator in 1..7 per cell, independently across cells."""
    rng = np.random.default_rng(rng)
    probs = mixture_probabilities(z_minus_h, table)
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None]
    idx = np.sum(u > cum[..., :-1], axis=-1)
    return (idx + 1).astype(np.int8)


def build_state_space(
    dataset: PanelDataset,
    state: ParameterState,
    table: MixtureTable = KSC_TABLE,
    offset_scale: float = 1e-6,
    z: np.ndarray = None,
) -> StateSpaceView:
    if z is None:
        z = linearized_observations(dataset, state, offset_scale)
    s = state.mixture_indicators
    if s is None:
        raise ModelError("state has no mixture indicators; sample them first")
    idx = np.asarray(s, dtype=np.int64) - 1
    intercept, slope, var = state.volcoeffs.stacked()
    return StateSpaceView(
        z=z,
        c=table.means[idx],
        sigma_e=table.variances[idx],
        alpha=np.column_stack([intercept, slope]),
        sigma_nu=var,
        n_individuals=dataset.n_individuals,
    )


def _check_spd(mat, t, what="filtered covariance"):
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise VolatilityError(f"non-SPD {what} at period {t + 1}") from None


def forward_filter(view: StateSpaceView, init_mean, init_cov, method: str = "auto") -> FilterMoments:
    """
    Kalman filter for the stacked log-volatility state.

    ``init_mean`` / ``init_cov`` are the prior moments of the first state h_1.
    With a diagonal ``init_cov`` the recursion separates into S independent
    univariate filters (``method="auto"`` picks that path); ``method="dense"``
    forces the full matrix recursion.
    """
    s_dim, n_t = view.z.shape
    m0 = np.broadcast_to(np.asarray(init_mean, float), (s_dim,)).copy()
    p0 = np.asarray(init_cov, float)
    if p0.ndim == 0:
        p0 = np.full(s_dim, float(p0))
    if p0.ndim == 1:
        if np.any(p0 <= 0):
            raise VolatilityError("initial covariance must be positive definite")
        diag_init, p0_diag = True, p0
        p0 = np.diag(p0)
    else:
        _check_spd(p0, -1, "initial covariance")
        diag_init = np.count_nonzero(p0 - np.diag(np.diag(p0))) == 0
        p0_diag = np.diag(p0)

    if method == "univariate" or (method == "auto" and diag_init):
        if not diag_init:
            raise VolatilityError("univariate filtering requires a diagonal initial covariance")
        return _filter_univariate(view, m0, p0_diag)
    if method not in ("auto", "dense"):
        raise ValueError(f"unknown method {method!r}")
    return _filter_dense(view, m0, p0)


def _filter_univariate(view, m0, p0):
    z, c, r = view.z, view.c, view.sigma_e
    a0, a1 = view.alpha[:, 0], view.alpha[:, 1]
    q = view.sigma_nu
    s_dim, n_t = z.shape
    m = np.empty((s_dim, n_t))
    d = np.empty((s_dim, n_t))
    a, p = m0, p0
    for t in range(n_t):
        if t > 0:
            a = a0 + a1 * m[:, t - 1]
            p = a1 * a1 * d[:, t - 1] + q
        k = p / (p + r[:, t])
        m[:, t] = a + k * (z[:, t] - c[:, t] - a)
        d[:, t] = k * r[:, t]  # equals (1 - k) p without the cancellation
        if np.any(~(d[:, t] > 0)):
            raise VolatilityError(f"non-SPD filtered covariance at period {t + 1}")
    return FilterMoments(m=m, D=d, diagonal=True)


def _filter_dense(view, m0, p0):
    z, c, r = view.z, view.c, view.sigma_e
    a0 = view.alpha[:, 0]
    F = np.diag(view.alpha[:, 1])
    Q = np.diag(view.sigma_nu)
    s_dim, n_t = z.shape
    eye = np.eye(s_dim)
    m = np.empty((s_dim, n_t))
    D = np.empty((n_t, s_dim, s_dim))
    a, P = m0, p0
    for t in range(n_t):
        if t > 0:
            a = a0 + F @ m[:, t - 1]
            P = F @ D[t - 1] @ F.T + Q
        R = np.diag(r[:, t])
        S = P + R
        K = np.linalg.solve(S, P).T  # P S^-1, S and P symmetric
        m[:, t] = a + K @ (z[:, t] - c[:, t] - a)
        IK = eye - K
        Dt = IK @ P @ IK.T + K @ R @ K.T
        D[t] = 0.5 * (Dt + Dt.T)
        _check_spd(D[t], t)
    return FilterMoments(m=m, D=D, diagonal=False)


def _psd_factor(cov, t):
    """Square-root factor of a PSD matrix; tolerates exact zeros."""
    w, v = np.linalg.eigh(cov)
    scale = max(1.0, float(np.max(np.abs(w))))
    if np.min(w) < -1e-10 * scale:
        raise VolatilityError(f"non-SPD conditional covariance at period {t + 1}")
    return v * np.sqrt(np.clip(w, 0.0, None))


def backward_sample_paths(moments: FilterMoments, view: StateSpaceView, rng=None, size=None):
    """
    Draw h_{1:T} | z_{1:T}: h_T ~ N(m_T, D_T), then for t = T-1, ..., 1

        h_t | h_{t+1} ~ N(m_t + J_t (h_{t+1} - a0 - a1 m_t), D_t - J_t P_{t+1} J_t')

    with P_{t+1} = a1 D_t a1' + Sigma_nu and J_t = D_t a1' P_{t+1}^{-1}.
    Returns an array (S, T), or (size, S, T) when ``size`` is given.
    """
    rng = np.random.default_rng(rng)
    n_draw = 1 if size is None else int(size)
    a0, a1 = view.alpha[:, 0], view.alpha[:, 1]
    q = view.sigma_nu
    m, D = moments.m, moments.D
    s_dim, n_t = m.shape
    out = np.empty((n_draw, s_dim, n_t))
    eps = rng.standard_normal((n_t, n_draw, s_dim))

    if moments.diagonal:
        out[:, :, -1] = m[:, -1] + np.sqrt(D[:, -1]) * eps[-1]
        for t in range(n_t - 2, -1, -1):
            d = D[:, t]
            p_next = a1 * a1 * d + q
            # p_next == 0 only when both d and q vanish; then h_t is pinned at m_t
            safe = np.where(p_next > 0, p_next, 1.0)
            j = np.where(p_next > 0, d * a1 / safe, 0.0)
            mean = m[:, t] + j * (out[:, :, t + 1] - a0 - a1 * m[:, t])
            var = d - j * j * p_next
            if np.any(var < -1e-10 * np.maximum(d, 1.0)):
                raise VolatilityError(f"non-SPD conditional covariance at period {t + 1}")
            out[:, :, t] = mean + np.sqrt(np.clip(var, 0.0, None)) * eps[t]
    else:
        F = np.diag(a1)
        Q = np.diag(q)
        out[:, :, -1] = m[:, -1] + eps[-1] @ _psd_factor(D[-1], n_t - 1).T
        for t in range(n_t - 2, -1, -1):
            Dt = D[t]
            P = F @ Dt @ F.T + Q
            J = np.linalg.lstsq(P, F @ Dt, rcond=None)[0].T  # D_t F' P^-1
            resid = out[:, :, t + 1] - (a0 + F @ m[:, t])
            mean = m[:, t] + resid @ J.T
            V = Dt - J @ P @ J.T
            out[:, :, t] = mean + eps[t] @ _psd_factor(0.5 * (V + V.T), t).T
    return out[0] if size is None else out


def backward_sample(moments: FilterMoments, view: StateSpaceView, rng=None) -> LogVolPaths:
    path = backward_sample_paths(moments, view, rng)
    n = view.n_individuals
    return LogVolPaths(h=path[:n], q=path[n:])


def ffbs(view: StateSpaceView, init_mean, init_var, rng=None) -> LogVolPaths:
    return backward_sample(forward_filter(view, init_mean, init_var), view, rng)


@dataclass(frozen=True)
class VolPrior:
    """
    Normal-inverse-Gamma prior for each AR(1) log-volatility equation:
    (a0, a1) | s2 ~ N(mean, s2 diag(var)), s2 ~ IG(nu / 2, nu * s2_prior / 2).

    ``*_var`` entries may be ``inf`` for a flat prior.
    """

    h_mean: tuple = (-0.04, 0.62)
    h_var: tuple = (0.01, 0.30)
    q_mean: tuple = (-0.04, 0.57)
    q_var: tuple = (0.01, 0.32)
    nu: float = 5.0
    s2: float = 0.2
    init_mean: float = 0.0
    init_var: float = 10.0

    def stacked(self, n_individuals: int, n_factors: int):
        mean = np.vstack(
            [np.tile(self.h_mean, (n_individuals, 1)), np.tile(self.q_mean, (n_factors, 1))]
        ).astype(float)
        var = np.vstack(
            [np.tile(self.h_var, (n_individuals, 1)), np.tile(self.q_var, (n_factors, 1))]
        ).astype(float)
        return mean, var


def vol_coeff_posterior(paths: np.ndarray, prior_mean, prior_var, nu, s2):
    """
    Conjugate posterior of per-series lagged regressions h_t on (1, h_{t-1}).

    Parameters
    ----------
    paths : ndarray (S, T)
    prior_mean, prior_var : ndarray (S, 2)

    Returns
    -------
    mean : (S, 2), V : (S, 2, 2), nu_post : float, ss_post : (S,)
        with s2 ~ IG(nu_post / 2, ss_post / 2) and coefficients
        ~ N(mean, s2 V).
    """
    paths = np.atleast_2d(paths)
    y = paths[:, 1:]
    x = paths[:, :-1]
    n = y.shape[1]
    if n < 2:
        raise VolatilityError("need at least 3 periods to update AR coefficients")
    xtx = np.empty((paths.shape[0], 2, 2))
    xtx[:, 0, 0] = n
    xtx[:, 0, 1] = xtx[:, 1, 0] = x.sum(axis=1)
    xtx[:, 1, 1] = (x * x).sum(axis=1)
    xty = np.column_stack([y.sum(axis=1), (x * y).sum(axis=1)])
    prec0 = np.zeros_like(xtx)
    with np.errstate(divide="ignore"):
        inv_var = np.where(np.isinf(prior_var), 0.0, 1.0 / np.asarray(prior_var, float))
    prec0[:, 0, 0] = inv_var[:, 0]
    prec0[:, 1, 1] = inv_var[:, 1]
    m0 = np.where(np.isinf(prior_var), 0.0, prior_mean)
    prec = prec0 + xtx
    V = np.linalg.inv(prec)
    rhs = np.einsum("sij,sj->si", prec0, m0) + xty
    mean = np.einsum("sij,sj->si", V, rhs)
    ss = (
        nu * s2
        + (y * y).sum(axis=1)
        + np.einsum("si,sij,sj->s", m0, prec0, m0)
        - np.einsum("si,sij,sj->s", mean, prec, mean)
    )
    return mean, V, nu + n, np.maximum(ss, 1e-300)


def sample_vol_coeffs(paths: LogVolPaths, prior: VolPrior = VolPrior(), rng=None, retry_budget: int = 1000):
    """
    Draw (intercept, slope, innovation variance) for every log-volatility
    series from its normal-inverse-Gamma full conditional, redrawing series
    whose slope falls outside (-1, 1).
    """
    rng = np.random.default_rng(rng)
    stacked = paths.stacked()
    n, p = paths.h.shape[0], paths.q.shape[0]
    pm, pv = prior.stacked(n, p)
    mean, V, nu_post, ss = vol_coeff_posterior(stacked, pm, pv, prior.nu, prior.s2)
    chol = np.linalg.cholesky(V)
    s_dim = stacked.shape[0]
    coef = np.empty((s_dim, 2))
    var = np.empty(s_dim)
    todo = np.arange(s_dim)
    for _ in range(retry_budget):
        k = len(todo)
        s2 = (ss[todo] / 2.0) / rng.gamma(nu_post / 2.0, 1.0, size=k)
        draw = mean[todo] + np.sqrt(s2)[:, None] * np.einsum(
            "sij,sj->si", chol[todo], rng.standard_normal((k, 2))
        )
        ok = np.abs(draw[:, 1]) < 1.0
        coef[todo[ok]] = draw[ok]
        var[todo[ok]] = s2[ok]
        todo = todo[~ok]
        if len(todo) == 0:
            return VolCoeffs.from_stacked(coef[:, 0], coef[:, 1], var, n)
    raise VolatilityError(
        f"stationarity retry budget ({retry_budget}) exhausted for series {todo.tolist()}"
    )


def ar_slope_proposal(paths: np.ndarray, intercept, var):
    """
    Location and (diagonal) scale of the AR slopes implied by the sampled
    paths, holding intercepts and innovation variances fixed:
    slope_hat = sum x (y - a0) / sum x^2, V = var / sum x^2.
    """
    paths = np.atleast_2d(paths)
    x = paths[:, :-1]
    y = paths[:, 1:] - np.asarray(intercept)[:, None]
    sxx = np.maximum((x * x).sum(axis=1), 1e-12)
    loc = (x * y).sum(axis=1) / sxx
    return loc, np.diag(np.asarray(var, float) / sxx)


def ar_path_loglik(paths: np.ndarray, intercept, slope, var) -> np.ndarray:
    """Per-series log density of h_2..h_T given h_1 under the AR(1) evolution."""
    paths = np.atleast_2d(paths)
    resid = paths[:, 1:] - np.asarray(intercept)[:, None] - np.asarray(slope)[:, None] * paths[:, :-1]
    var = np.asarray(var, float)[:, None]
    return -0.5 * np.sum(np.log(2 * np.pi * var) + resid**2 / var, axis=1)


def mixture_ks_distance(table: MixtureTable = KSC_TABLE, n_draws: int = 1_000_000, rng=None) -> float:
    """Kolmogorov-Smirnov distance between the mixture CDF and simulated log chi^2_1 draws."""
    rng = np.random.default_rng(rng)
    x = np.sort(np.log(rng.standard_normal(n_draws) ** 2))
    cdf = table.cdf(x)
    n = len(x)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))


def log_chi2_logpdf(x):
    """Exact density of log(eps^2), eps ~ N(0, 1)."""
    x = np.asarray(x, float)
    return stats.chi2.logpdf(np.exp(x), df=1) + x
