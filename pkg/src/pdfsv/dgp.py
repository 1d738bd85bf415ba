"""Seeded simulation of synthetic panels with known parameters."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    FactorPath,
    LoadingMatrix,
    LogVolPaths,
    ModelDims,
    ModelError,
    PanelDataset,
    ParameterState,
    RegressionCoeffs,
    ScaleParams,
    VolCoeffs,
    upper_triangle_mask,
    validate_state,
)

SCENARIOS = {
    "M1": (10, 3, 3, 200),
    "M2": (20, 3, 3, 200),
    "M3": (10, 3, 3, 400),
    "M4": (20, 3, 3, 400),
    "M5": (10, 4, 4, 200),
    "M6": (20, 4, 4, 200),
    "M7": (40, 4, 4, 400),
    "M8": (40, 4, 6, 1000),
}


@dataclass(frozen=True)
class DgpConfig:
    """
    Settings of the synthetic-panel generator.

    Covariate ``a`` (1-based, a >= 2) is N(2a, 2^a) unless
    ``covariate_moments`` gives explicit (mean, variance) pairs for
    covariates 2..k; covariate 1 is the intercept. AR slopes are drawn as
    ``*_center`` plus uniform jitter of half-width ``*_jitter``.
    """

    dims: ModelDims
    seed: int = 0
    covariate_moments: tuple = None
    beta_mean: float = 0.06
    beta_var: float = 0.009
    lambda_mean: float = 0.8
    lambda_var: float = 0.1
    alpha0_mean: float = 0.08
    alpha0_var: float = 0.01
    alpha1_center: float = 0.85
    alpha1_jitter: float = 0.05
    phi0_mean: float = 0.09
    phi0_var: float = 0.01
    phi1_center: float = 0.95
    phi1_jitter: float = 0.03
    sigma2_v: float = 1.0
    sigma2_w: float = 1.0
    h_init: float = 0.0
    q_init: float = 0.0
    scenario: str = None

    def __post_init__(self):
        for name in ("beta_var", "lambda_var", "alpha0_var", "phi0_var", "sigma2_v", "sigma2_w"):
            if not getattr(self, name) >= 0:
                raise ModelError(f"{name} must be nonnegative")
        for name in ("alpha1_jitter", "phi1_jitter"):
            if getattr(self, name) < 0:
                raise ModelError(f"{name} must be nonnegative")
        if self.covariate_moments is not None:
            if len(self.covariate_moments) != self.dims.n_covariates - 1:
                raise ModelError("covariate_moments needs one (mean, variance) pair per non-intercept covariate")
            if any(v < 0 for _, v in self.covariate_moments):
                raise ModelError("covariate variances must be nonnegative")

    def covariate_pairs(self):
        if self.covariate_moments is not None:
            return [tuple(map(float, mv)) for mv in self.covariate_moments]
        return [(2.0 * a, 2.0**a) for a in range(2, self.dims.n_covariates + 1)]

    def with_seed(self, seed: int) -> "DgpConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class GroundTruth:
    state: ParameterState
    config: DgpConfig = field(repr=False, default=None)


def scenario_preset(name: str, seed: int = 0, n_periods: int = None) -> DgpConfig:
    """Dimension preset M1..M8; ``n_periods`` overrides T."""
    key = str(name).upper()
    if key not in SCENARIOS:
        raise ModelError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIOS)}")
    n, k, p, t = SCENARIOS[key]
    if n_periods is not None:
        t = int(n_periods)
    return DgpConfig(dims=ModelDims(n, t, k, p), seed=seed, scenario=key)


def _ar1_path(rng_shocks, intercept, slope, var, init):
    """h_t = a0 + a1 h_{t-1} + sqrt(var) e_t for t = 1..T, starting from h_0 = init."""
    n, t = rng_shocks.shape
    out = np.empty((n, t))
    prev = np.full(n, float(init))
    sd = np.sqrt(var)
    for s in range(t):
        prev = intercept + slope * prev + sd * rng_shocks[:, s]
        out[:, s] = prev
    return out


def simulate_panel(config: DgpConfig):
    """
    Generate (dataset, ground truth) in a fixed order: covariates, beta,
    loadings, idiosyncratic AR coefficients, factor AR coefficients,
    volatility shocks v then w, log-volatility paths from h_0 = q_0,
    idiosyncratic errors u, factors f, returns.
    """
    dims = config.dims
    n, t, k, p = dims.n_individuals, dims.n_periods, dims.n_covariates, dims.n_factors
    rng = np.random.default_rng(config.seed)

    x = np.ones((n, t, k))
    for a, (mean, var) in enumerate(config.covariate_pairs(), start=1):
        x[:, :, a] = rng.normal(mean, np.sqrt(var), size=(n, t))

    beta = rng.normal(config.beta_mean, np.sqrt(config.beta_var), size=(n, k))

    lam = rng.normal(config.lambda_mean, np.sqrt(config.lambda_var), size=(n, p))
    lam[upper_triangle_mask(n, p)] = 0.0
    d = np.arange(p)
    lam[d, d] = np.abs(lam[d, d])

    alpha0 = rng.normal(config.alpha0_mean, np.sqrt(config.alpha0_var), size=n)
    alpha1 = config.alpha1_center + rng.uniform(-config.alpha1_jitter, config.alpha1_jitter, size=n)
    alpha1 = np.clip(alpha1, -0.999, 0.999)
    phi0 = rng.normal(config.phi0_mean, np.sqrt(config.phi0_var), size=p)
    phi1 = config.phi1_center + rng.uniform(-config.phi1_jitter, config.phi1_jitter, size=p)
    phi1 = np.clip(phi1, -0.999, 0.999)

    v = rng.standard_normal((n, t))
    w = rng.standard_normal((p, t))
    sigma2_v = np.full(n, float(config.sigma2_v))
    sigma2_w = np.full(p, float(config.sigma2_w))
    h = _ar1_path(v, alpha0, alpha1, sigma2_v, config.h_init)
    q = _ar1_path(w, phi0, phi1, sigma2_w, config.q_init)

    u = np.exp(h / 2.0) * rng.standard_normal((n, t))
    f = np.exp(q / 2.0) * rng.standard_normal((p, t))

    r = np.einsum("ntk,nk->nt", x, beta) + lam @ f + u
    names = ("const",) + tuple(f"x{a}" for a in range(2, k + 1))
    dataset = PanelDataset(returns=r, covariates=x, covariate_names=names)

    state = ParameterState(
        coeffs=RegressionCoeffs(beta=beta),
        loadings=LoadingMatrix(lam),
        factors=FactorPath(f),
        logvols=LogVolPaths(h=h, q=q),
        volcoeffs=VolCoeffs(alpha0, alpha1, phi0, phi1, sigma2_v, sigma2_w),
        scales=ScaleParams(sigma2_err=np.ones(n), vartheta=np.ones(n), phi_acf=np.concatenate([alpha1, phi1])),
    )
    problems = validate_state(state, dims)
    if problems:
        raise ModelError("generated ground truth is invalid: " + "; ".join(problems))
    return dataset, GroundTruth(state=state, config=config)


def is_intercept_column(col: np.ndarray) -> bool:
    return bool(np.all(col == 1.0))


def standardize_covariates(dataset: PanelDataset, skip_intercept: bool = True) -> PanelDataset:
    """
    Rescale each covariate to pooled mean 0 and standard deviation 1 over the
    whole N x T grid. With ``skip_intercept`` a column of ones is left alone.
    """
    x = dataset.covariates.copy()
    for a, name in enumerate(dataset.covariate_names):
        col = x[:, :, a]
        if skip_intercept and is_intercept_column(col):
            continue
        sd = col.std()
        if not sd > 0 or sd < 1e-12 * max(1.0, abs(col.mean())):
            raise ModelError(f"covariate {name!r} has zero variance and cannot be standardized")
        x[:, :, a] = (col - col.mean()) / sd
    return replace(dataset, covariates=x)
