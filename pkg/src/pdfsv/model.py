"""
Domain types and shared density primitives for the panel data factor
stochastic volatility model

    r_it = beta_i' x_it + lambda_i' f_t + u_it,   u_it = exp(h_it / 2) eta_it
    h_it = alpha_i0 + alpha_i1 h_i,t-1 + v_it,     v_it ~ N(0, sigma2_v[i])
    f_jt = exp(q_jt / 2) eps_jt
    q_jt = phi_j0 + phi_j1 q_j,t-1 + w_jt,         w_jt ~ N(0, sigma2_w[j])

All arrays are dense numpy arrays; individuals index rows, periods index
columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


class ModelError(ValueError):
    """Raised on inconsistent dimensions or invalid model inputs."""


@dataclass(frozen=True)
class ModelDims:
    n_individuals: int
    n_periods: int
    n_covariates: int
    n_factors: int

    def __post_init__(self):
        if self.n_individuals < 1 or self.n_periods < 1 or self.n_covariates < 1:
            raise ModelError("N, T and k must be positive")
        if self.n_factors < 0:
            raise ModelError("p must be nonnegative")
        if self.n_factors >= self.n_individuals:
            raise ModelError(
                f"number of factors p={self.n_factors} must be smaller than "
                f"N={self.n_individuals}"
            )
        if self.n_periods < 2:
            raise ModelError("T must be at least 2 for the AR(1) evolutions")

    @property
    def n_states(self) -> int:
        """Dimension of the stacked log-volatility state (N + p)."""
        return self.n_individuals + self.n_factors


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel: ``returns`` is N x T, ``covariates`` is N x T x k."""

    returns: np.ndarray
    covariates: np.ndarray
    period_index: np.ndarray = None
    individual_ids: tuple = None
    covariate_names: tuple = None

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=float)
        x = np.asarray(self.covariates, dtype=float)
        if r.ndim != 2:
            raise ModelError("returns must be an N x T matrix")
        if x.ndim != 3 or x.shape[:2] != r.shape:
            raise ModelError(
                f"covariates must be N x T x k with N x T = {r.shape}, got {x.shape}"
            )
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(x))):
            raise ModelError("dataset contains non-finite values")
        n, t, k = x.shape
        periods = self.period_index
        if periods is None:
            periods = np.arange(1, t + 1)
        periods = np.asarray(periods, dtype=np.int64)
        if periods.shape != (t,):
            raise ModelError("period_index must have length T")
        if t > 1 and np.any(np.diff(periods) != 1):
            raise ModelError("period labels must be strictly increasing without gaps")
        ids = self.individual_ids
        if ids is None:
            ids = tuple(str(i + 1) for i in range(n))
        if len(ids) != n:
            raise ModelError("individual_ids must have length N")
        names = self.covariate_names
        if names is None:
            names = tuple(f"x{a + 1}" for a in range(k))
        if len(names) != k:
            raise ModelError("covariate_names must have length k")
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "period_index", periods)
        object.__setattr__(self, "individual_ids", tuple(str(i) for i in ids))
        object.__setattr__(self, "covariate_names", tuple(str(c) for c in names))

    @property
    def n_individuals(self) -> int:
        return self.returns.shape[0]

    @property
    def n_periods(self) -> int:
        return self.returns.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    def dims(self, n_factors: int) -> ModelDims:
        return ModelDims(self.n_individuals, self.n_periods, self.n_covariates, n_factors)

    def mean_part(self, beta: np.ndarray) -> np.ndarray:
        """Observable part beta_i' x_it as an N x T matrix."""
        return np.einsum("ntk,nk->nt", self.covariates, beta)


@dataclass(frozen=True)
class RegressionCoeffs:
    beta: np.ndarray  # N x k
    mu_beta: np.ndarray = None  # k, hierarchical mean
    v_beta_inv: np.ndarray = None  # k x k, hierarchical precision


@dataclass(frozen=True)
class LoadingMatrix:
    lam: np.ndarray  # N x p


@dataclass(frozen=True)
class FactorPath:
    f: np.ndarray  # p x T


@dataclass(frozen=True)
class LogVolPaths:
    h: np.ndarray  # N x T
    q: np.ndarray  # p x T

    def stacked(self) -> np.ndarray:
        return np.vstack([self.h, self.q])


@dataclass(frozen=True)
class VolCoeffs:
    alpha0: np.ndarray
    alpha1: np.ndarray
    phi0: np.ndarray
    phi1: np.ndarray
    sigma2_v: np.ndarray
    sigma2_w: np.ndarray

    def stacked(self):
        """(intercepts, slopes, innovation variances), each of length N + p."""
        return (
            np.concatenate([self.alpha0, self.phi0]),
            np.concatenate([self.alpha1, self.phi1]),
            np.concatenate([self.sigma2_v, self.sigma2_w]),
        )

    @classmethod
    def from_stacked(cls, intercept, slope, var, n_individuals):
        n = n_individuals
        return cls(
            alpha0=np.asarray(intercept[:n], dtype=float),
            alpha1=np.asarray(slope[:n], dtype=float),
            phi0=np.asarray(intercept[n:], dtype=float),
            phi1=np.asarray(slope[n:], dtype=float),
            sigma2_v=np.asarray(var[:n], dtype=float),
            sigma2_w=np.asarray(var[n:], dtype=float),
        )


@dataclass(frozen=True)
class ScaleParams:
    sigma2_err: np.ndarray  # N
    vartheta: np.ndarray  # N
    delta_sigma: float = 1.0
    phi_acf: np.ndarray = None  # stacked AR slopes (alpha_i1, phi_j1)
    sigma_lambda: float = 1.0


@dataclass(frozen=True)
class ParameterState:
    coeffs: RegressionCoeffs
    loadings: LoadingMatrix
    factors: FactorPath
    logvols: LogVolPaths
    volcoeffs: VolCoeffs
    scales: ScaleParams
    mixture_indicators: np.ndarray = field(default=None)  # (N + p) x T, values 1..7

    @property
    def beta(self):
        return self.coeffs.beta

    @property
    def lam(self):
        return self.loadings.lam

    @property
    def f(self):
        return self.factors.f

    @property
    def h(self):
        return self.logvols.h

    @property
    def q(self):
        return self.logvols.q

    def evolve(self, **changes) -> "ParameterState":
        return replace(self, **changes)


def assemble_omega(loadings, q_t, h_t) -> np.ndarray:
    """
    Marginal covariance of r_t given the log-volatilities,
    Omega_t = Lambda Q_t Lambda' + Sigma_t.

    Parameters
    ----------
    loadings : LoadingMatrix or ndarray, shape (N, p)
    q_t : ndarray, shape (p,)
        Factor log-volatilities at period t.
    h_t : ndarray, shape (N,)
        Idiosyncratic log-volatilities at period t.
    """
    lam = loadings.lam if isinstance(loadings, LoadingMatrix) else np.asarray(loadings, float)
    q_t = np.atleast_1d(np.asarray(q_t, dtype=float))
    h_t = np.atleast_1d(np.asarray(h_t, dtype=float))
    if lam.ndim != 2 or lam.shape[0] != h_t.shape[0] or lam.shape[1] != q_t.shape[0]:
        raise ModelError(
            f"dimension mismatch: loadings {lam.shape}, q_t {q_t.shape}, h_t {h_t.shape}"
        )
    omega = (lam * np.exp(q_t)) @ lam.T + np.diag(np.exp(h_t))
    return 0.5 * (omega + omega.T)


def total_parameter_count(dims: ModelDims) -> int:
    """kN + Np - (p^2 + p)/2 + 2(N + p) free parameters under identification."""
    n, k, p = dims.n_individuals, dims.n_covariates, dims.n_factors
    return k * n + n * p - (p * p + p) // 2 + 2 * (n + p)


def upper_triangle_mask(n_individuals: int, n_factors: int) -> np.ndarray:
    """Boolean N x p mask of loadings pinned at zero (lambda_ij with j > i)."""
    rows = np.arange(n_individuals)[:, None]
    cols = np.arange(n_factors)[None, :]
    return cols > rows


def validate_state(state: ParameterState, dims: ModelDims) -> list[str]:
    """
    Check identification, stationarity and positivity constraints.

    Returns the list of violations; an empty list means the state is valid.
    Never raises and never mutates ``state``.
    """
    out = []
    n, t, k, p = dims.n_individuals, dims.n_periods, dims.n_covariates, dims.n_factors

    def _shape(name, arr, shape):
        if arr is None or np.shape(arr) != shape:
            out.append(f"{name}: expected shape {shape}, got {np.shape(arr)}")
            return False
        if not np.all(np.isfinite(arr)):
            out.append(f"{name}: non-finite entries")
            return False
        return True

    _shape("beta", state.coeffs.beta, (n, k))
    if _shape("lambda", state.loadings.lam, (n, p)) and p > 0:
        lam = state.loadings.lam
        if np.any(lam[upper_triangle_mask(n, p)] != 0.0):
            out.append("upper-triangle nonzero: lambda_ij != 0 for some j > i")
        if np.any(np.diag(lam[:p]) <= 0.0):
            out.append("nonpositive diagonal loading: lambda_ii <= 0 for some i <= p")
    _shape("f", state.factors.f, (p, t))
    _shape("h", state.logvols.h, (n, t))
    _shape("q", state.logvols.q, (p, t))

    vc = state.volcoeffs
    for name, arr, size in [
        ("alpha0", vc.alpha0, n),
        ("alpha1", vc.alpha1, n),
        ("sigma2_v", vc.sigma2_v, n),
        ("phi0", vc.phi0, p),
        ("phi1", vc.phi1, p),
        ("sigma2_w", vc.sigma2_w, p),
    ]:
        _shape(name, None if arr is None else np.asarray(arr), (size,))
    if vc.alpha1 is not None and np.any(np.abs(vc.alpha1) >= 1.0):
        out.append("nonstationary AR coefficient: |alpha_i1| >= 1")
    if vc.phi1 is not None and np.any(np.abs(vc.phi1) >= 1.0):
        out.append("nonstationary AR coefficient: |phi_j1| >= 1")
    for name, arr in [("sigma2_v", vc.sigma2_v), ("sigma2_w", vc.sigma2_w)]:
        if arr is not None and np.any(np.asarray(arr) <= 0.0):
            out.append(f"nonpositive variance: {name}")

    sc = state.scales
    for name, arr in [("sigma2_err", sc.sigma2_err), ("vartheta", sc.vartheta)]:
        if _shape(name, None if arr is None else np.asarray(arr), (n,)) and np.any(
            np.asarray(arr) <= 0.0
        ):
            out.append(f"nonpositive scale: {name}")
    if not (np.isfinite(sc.delta_sigma) and sc.delta_sigma > 0):
        out.append("nonpositive scale: delta_sigma")
    if not (np.isfinite(sc.sigma_lambda) and sc.sigma_lambda > 0):
        out.append("nonpositive scale: sigma_lambda")

    s = state.mixture_indicators
    if s is not None:
        if np.shape(s) != (n + p, t):
            out.append(f"mixture_indicators: expected shape {(n + p, t)}, got {np.shape(s)}")
        elif np.any((s < 1) | (s > 7)):
            out.append("mixture_indicators: entries outside 1..7")
    return out


def conditional_loglik_t(r_t, x_t, state: ParameterState, t: int) -> float:
    """
    log N(r_t | beta' x_t + Lambda f_t, Sigma_t) with the factors conditioned
    on, so the covariance is the diagonal Sigma_t = diag(exp(h_t)).
    """
    r_t = np.asarray(r_t, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    if not (np.all(np.isfinite(r_t)) and np.all(np.isfinite(x_t))):
        raise ModelError("non-finite inputs to conditional_loglik_t")
    mean = np.einsum("nk,nk->n", x_t, state.beta)
    if state.lam.shape[1] > 0:
        mean = mean + state.lam @ state.f[:, t]
    h_t = state.h[:, t]
    resid = r_t - mean
    return float(-0.5 * np.sum(LOG_2PI + h_t + resid**2 * np.exp(-h_t)))


def panel_loglik(dataset: PanelDataset, state: ParameterState) -> float:
    """Sum over t of :func:`conditional_loglik_t`, vectorised."""
    resid = dataset.returns - dataset.mean_part(state.beta)
    if state.lam.shape[1] > 0:
        resid = resid - state.lam @ state.f
    return float(-0.5 * np.sum(LOG_2PI + state.h + resid**2 * np.exp(-state.h)))


def residuals(dataset: PanelDataset, state: ParameterState) -> np.ndarray:
    """u_it = r_it - beta_i' x_it - lambda_i' f_t."""
    resid = dataset.returns - dataset.mean_part(state.beta)
    if state.lam.shape[1] > 0:
        resid = resid - state.lam @ state.f
    return resid
