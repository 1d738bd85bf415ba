"""
Sweep scheduling, storage, checkpointing and posterior summaries.

Each sweep runs the regression block (beta, vartheta, sigma^2, AR-slope
M-H, then the hyperparameters), the factor block (loadings, factors,
sigma_lambda) and the volatility block (mixture indicators, FFBS of the
stacked log-volatilities, AR coefficients), always in that order.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np
from scipy.ndimage import uniform_filter1d

from .factor import (
    LoadingPrior,
    intercept_column,
    sample_factor_shift,
    sample_factors,
    sample_loadings,
    sample_sigma_lambda,
)
from .model import (
    FactorPath,
    LoadingMatrix,
    LogVolPaths,
    ModelError,
    PanelDataset,
    ParameterState,
    RegressionCoeffs,
    ScaleParams,
    VolCoeffs,
    residuals,
    validate_state,
)
from .regression import (
    RegressionPrior,
    compute_nu_delta,
    sample_beta_block,
    sample_beta_hyperparams,
    sample_delta_sigma,
    sample_phi_mh,
    sample_sigma_err,
    sample_vartheta,
)
from .volatility import (
    KSC_TABLE,
    VolPrior,
    backward_sample,
    build_state_space,
    forward_filter,
    linearized_observations,
    log_squared,
    mixture_probabilities,
    sample_mixture_indicators,
    sample_vol_coeffs,
)

BLOCK_ORDER = ("regression", "factor", "volatility")


class ChainError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorConfig:
    """Every hyperparameter of the sampler, JSON friendly."""

    beta_prior_mean: float = 0.02
    beta_prior_var: float = 0.04
    wishart_dof: float = None  # None means k + 2
    nu_sigma: float = 5.0
    delta_sigma0: float = 5.0
    nu_sigma0: float = 5.0
    nu_vartheta: float = 10.0
    t_proposal_dof: float = 10.0
    loading_prior_mean: float = 0.9
    c_prior_var: float = 0.1
    nu_lambda: float = 4.0
    s2_lambda: float = 1.0
    delta_lambda: float = 0.0
    loading_t_dof: float = 10.0
    newton_steps: int = 5
    loading_mh_refresh: bool = True
    h_coef_mean: tuple = (-0.04, 0.62)
    h_coef_var: tuple = (0.01, 0.30)
    q_coef_mean: tuple = (-0.04, 0.57)
    q_coef_var: tuple = (0.01, 0.32)
    vol_nu: float = 5.0
    vol_s2: float = 0.2
    h_init_mean: float = 0.0
    h_init_var: float = 10.0

    def __post_init__(self):
        for name in ("h_coef_mean", "h_coef_var", "q_coef_mean", "q_coef_var"):
            val = tuple(float(v) for v in getattr(self, name))
            if len(val) != 2:
                raise ModelError(f"{name} must have two entries (intercept, slope)")
            object.__setattr__(self, name, val)
        if not self.h_init_var > 0:
            raise ModelError("h_init_var must be positive")
        # surface invalid values early
        self.loading_prior()
        self.vol_prior()

    def regression_prior(self, k: int) -> RegressionPrior:
        dof = k + 2.0 if self.wishart_dof is None else float(self.wishart_dof)
        return RegressionPrior(
            mu_beta_prior_mean=np.full(k, self.beta_prior_mean),
            mu_beta_prior_cov=self.beta_prior_var * np.eye(k),
            wishart_dof=dof,
            wishart_scale=np.eye(k) / (dof * self.beta_prior_var),
            nu_sigma=self.nu_sigma,
            delta_sigma0=self.delta_sigma0,
            nu_sigma0=self.nu_sigma0,
            nu_vartheta=self.nu_vartheta,
            t_proposal_dof=self.t_proposal_dof,
        )

    def loading_prior(self) -> LoadingPrior:
        return LoadingPrior(
            c_prior_var=self.c_prior_var,
            prior_mean=self.loading_prior_mean,
            nu_lambda=self.nu_lambda,
            s2_lambda=self.s2_lambda,
            delta_lambda=self.delta_lambda,
            t_dof=self.loading_t_dof,
            newton_steps=int(self.newton_steps),
            mh_refresh=bool(self.loading_mh_refresh),
        )

    def vol_prior(self) -> VolPrior:
        return VolPrior(
            h_mean=self.h_coef_mean,
            h_var=self.h_coef_var,
            q_mean=self.q_coef_mean,
            q_var=self.q_coef_var,
            nu=self.vol_nu,
            s2=self.vol_s2,
            init_mean=self.h_init_mean,
            init_var=self.h_init_var,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorConfig":
        return _from_dict(cls, d)


@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 12000
    burn_in: int = 2000
    thin: int = 1
    seed: int = 0
    block_order: tuple = BLOCK_ORDER
    path_thin: int = 10
    stationarity_retry_budget: int = 1000
    phi_mh: bool = True
    factor_shift: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_order", tuple(self.block_order))
        if self.block_order != BLOCK_ORDER:
            raise ModelError(f"block_order is fixed to {list(BLOCK_ORDER)}")
        if self.n_iter < 1 or self.burn_in < 0:
            raise ModelError("n_iter must be positive and burn_in nonnegative")
        if self.burn_in >= self.n_iter:
            raise ModelError(f"burn_in ({self.burn_in}) must be smaller than n_iter ({self.n_iter})")
        if self.thin < 1 or self.path_thin < 1:
            raise ModelError("thin and path_thin must be at least 1")
        if self.stationarity_retry_budget < 1:
            raise ModelError("stationarity_retry_budget must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ModelError("seed must be a 64-bit unsigned integer")

    @property
    def n_retained(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_order"] = list(self.block_order)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChainConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ModelError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class ChainOutput:
    """
    Retained draws. ``traces`` is (n_retained, n_params) with column names
    ``names``; ``sweeps`` holds the 1-based sweep index of each row. Latent
    paths are kept every ``path_thin``-th retained sweep in ``paths``.
    """

    names: list
    traces: np.ndarray
    sweeps: np.ndarray
    config_hash: str
    acceptance_rates: dict
    individual_ids: tuple = ()
    covariate_names: tuple = ()
    n_factors: int = 0
    paths: dict = field(default_factory=dict)
    path_sweeps: np.ndarray = None
    final_state: ParameterState = None
    n_valid_snapshots: int = 0

    def trace(self, name) -> np.ndarray:
        return self.traces[:, self.names.index(name)]

    def block(self, prefix) -> np.ndarray:
        idx = [j for j, n in enumerate(self.names) if n.startswith(prefix + "[")]
        return self.traces[:, idx]


def dataset_digest(dataset: PanelDataset) -> str:
    h = hashlib.sha256()
    for arr in (dataset.returns, dataset.covariates, dataset.period_index):
        a = np.ascontiguousarray(arr)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    h.update(json.dumps([dataset.individual_ids, dataset.covariate_names]).encode())
    return h.hexdigest()


def config_hash(dataset: PanelDataset, priors: PriorConfig, config: ChainConfig, n_factors: int) -> str:
    payload = {
        "dataset": dataset_digest(dataset),
        "priors": priors.to_dict(),
        "chain": config.to_dict(),
        "n_factors": int(n_factors),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- state init


def _ols_beta(dataset):
    n, _, k = dataset.covariates.shape
    beta = np.empty((n, k))
    for i in range(n):
        beta[i] = np.linalg.lstsq(dataset.covariates[i], dataset.returns[i], rcond=None)[0]
    return beta


def identify_loadings(lam: np.ndarray, f: np.ndarray):
    """
    Rotate (Lambda, F) so Lambda has a lower-triangular leading block with
    positive diagonal, leaving Lambda F unchanged.
    """
    p = lam.shape[1]
    if p == 0:
        return lam.copy(), f.copy()
    Q, R = np.linalg.qr(lam[:p].T)
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    Q = Q * signs
    lam_new = lam @ Q
    f_new = Q.T @ f
    lam_new[np.triu_indices(p, 1)] = 0.0
    d = np.arange(p)
    lam_new[d, d] = np.maximum(lam_new[d, d], 1e-8)
    return lam_new, f_new


def _smoothed_logvol(x):
    z = log_squared(x) - KSC_TABLE.mean()
    z = uniform_filter1d(z, size=5, axis=1, mode="nearest")
    # rows fitted almost exactly would otherwise get near-infinite weight
    floor = np.log(1e-2 * np.median(np.mean(x * x, axis=1)) + 1e-300)
    return np.maximum(z, floor)


def _principal_factors(e, p):
    # factors orthogonal to the constant so intercepts stay with beta
    e = e - e.mean(axis=1, keepdims=True)
    U, S, Vt = np.linalg.svd(e, full_matrices=False)
    t = e.shape[1]
    return U[:, :p] * S[:p] / np.sqrt(t), Vt[:p] * np.sqrt(t)


def _wls(x, y, w):
    sw = np.sqrt(w)
    return np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)[0]


def _interactive_ls(dataset, p, n_rounds=30):
    """
    Joint least-squares fit of r_it = beta_i' x_it + lambda_i' f_t + u_it.

    Factors start as principal components of the raw returns; each round
    then regresses every r_i on (x_i, f) to get (beta_i, lambda_i) together
    and solves the cross-sectional regression for each f_t. Both steps are
    weighted by inverse smoothed squared residuals so periods with explosive
    variance do not dominate.
    """
    x, r = dataset.covariates, dataset.returns
    n, t, k = x.shape
    _, f = _principal_factors(r, p)
    w = np.ones_like(r)
    beta, lam = np.zeros((n, k)), np.zeros((n, p))
    for _ in range(n_rounds):
        for i in range(n):
            coef = _wls(np.hstack([x[i], f.T]), r[i], w[i])
            beta[i], lam[i] = coef[:k], coef[k:]
        y = r - dataset.mean_part(beta)
        for s in range(t):
            f[:, s] = _wls(lam, y[:, s], w[:, s])
        # keep f centred with F F' / T = I; the intercepts absorb the means
        f = f - f.mean(axis=1, keepdims=True)
        chol = np.linalg.cholesky(f @ f.T / t + 1e-12 * np.eye(p))
        f = np.linalg.solve(chol, f)
        lam = lam @ chol
        u = y - lam @ f
        w = np.exp(-_smoothed_logvol(u))
    for i in range(n):
        coef = _wls(np.hstack([x[i], f.T]), r[i], w[i])
        beta[i], lam[i] = coef[:k], coef[k:]
    a = intercept_column(dataset)
    if a >= 0:
        # the intercepts only see lambda_i' mean(f); centre each factor where
        # its own volatility is low, as the N(0, exp(q)) factor prior does
        prec = np.exp(-_smoothed_logvol(f))
        shift = np.sum(prec * f, axis=1) / np.sum(prec, axis=1)
        f = f - shift[:, None]
        beta[:, a] += lam @ shift
    return beta, lam, f


def initial_state(dataset: PanelDataset, n_factors: int, priors: PriorConfig) -> ParameterState:
    """
    Deterministic starting point: beta and a rank-p principal-components fit
    by alternating least squares, rotated to the identified form, with each
    factor rescaled so its free loadings average the prior loading mean.
    """
    n, t, k = dataset.covariates.shape
    p = n_factors
    dataset.dims(p)
    if p > 0:
        beta, lam, f = _interactive_ls(dataset, p)
        lam, f = identify_loadings(lam, f)
        target = abs(priors.loading_prior_mean) or 1.0
        for j in range(p):
            c = np.mean(np.abs(lam[j:, j])) / target
            if c > 0:
                lam[:, j] /= c
                f[j] *= c
    else:
        beta = _ols_beta(dataset)
        lam, f = np.zeros((n, 0)), np.zeros((0, t))
    e = dataset.returns - dataset.mean_part(beta)
    u = e - lam @ f
    h = _smoothed_logvol(u)
    q = _smoothed_logvol(f) if p > 0 else np.zeros((0, t))
    reg = priors.regression_prior(k)
    state = ParameterState(
        coeffs=RegressionCoeffs(beta, reg.mu_beta_prior_mean.copy(), reg.wishart_dof * reg.wishart_scale),
        loadings=LoadingMatrix(lam),
        factors=FactorPath(f),
        logvols=LogVolPaths(h=h, q=q),
        volcoeffs=VolCoeffs(
            alpha0=np.zeros(n), alpha1=np.full(n, 0.9), phi0=np.zeros(p), phi1=np.full(p, 0.9),
            sigma2_v=np.full(n, 0.1), sigma2_w=np.full(p, 0.1),
        ),
        scales=ScaleParams(
            sigma2_err=np.ones(n), vartheta=np.ones(n), delta_sigma=1.0,
            phi_acf=np.full(n + p, 0.9), sigma_lambda=1.0,
        ),
    )
    z = linearized_observations(dataset, state)
    s = np.argmax(mixture_probabilities(z - state.logvols.stacked()), axis=-1) + 1
    return state.evolve(mixture_indicators=s.astype(np.int8))


# ---------------------------------------------------------------- blocks


class _Sampler:
    def __init__(self, dataset, n_factors, priors: PriorConfig, config: ChainConfig):
        self.dataset = dataset
        self.p = n_factors
        self.priors = priors
        self.config = config
        self.reg_prior = priors.regression_prior(dataset.n_covariates)
        self.load_prior = priors.loading_prior()
        self.vol_prior = priors.vol_prior()
        self.counts = {"phi": [0, 0], "loadings": [0, 0]}

    def regression(self, state, rng):
        ds = self.dataset
        n, t = ds.n_individuals, ds.n_periods
        state = state.evolve(coeffs=sample_beta_block(ds, state, self.reg_prior, rng))
        nu, _ = compute_nu_delta(ds, state)
        vt = sample_vartheta(nu, self.reg_prior, rng, n_obs=t)
        state = state.evolve(scales=_replace(state.scales, vartheta=vt))
        _, delta = compute_nu_delta(ds, state)
        s2 = sample_sigma_err(delta, self.reg_prior, rng, n_obs=n * t,
                              delta_sigma=state.scales.delta_sigma, n_individuals=n)
        state = state.evolve(scales=_replace(state.scales, sigma2_err=s2))
        if self.config.phi_mh:
            state = self._phi_step(state, rng)
        mu, v_inv = sample_beta_hyperparams(state.coeffs, self.reg_prior, rng)
        state = state.evolve(coeffs=RegressionCoeffs(state.beta, mu, v_inv))
        ds_new = sample_delta_sigma(state.scales.sigma2_err, self.reg_prior, rng)
        return state.evolve(scales=_replace(state.scales, delta_sigma=ds_new))

    def _phi_step(self, state, rng):
        intercept, slope, var = state.volcoeffs.stacked()
        paths = state.logvols.stacked()
        pm, pv = self.vol_prior.stacked(self.dataset.n_individuals, self.p)
        m1, v1 = pm[:, 1], pv[:, 1]
        x = paths[:, :-1]
        y = paths[:, 1:] - intercept[:, None]
        # conditional of each slope given intercept and variance under the
        # same normal prior used by the coefficient block
        prec0 = np.where(np.isinf(v1), 0.0, 1.0 / (var * v1))
        prec = (x * x).sum(axis=1) / var + prec0
        loc = ((x * y).sum(axis=1) / var + prec0 * np.where(np.isinf(v1), 0.0, m1)) / prec
        scale = np.diag(1.0 / prec)

        def log_prior(phi):
            if np.any(np.abs(phi) >= 1.0):
                return -np.inf
            return float(-0.5 * np.sum(prec0 * (phi - m1) ** 2))

        phi, ok = sample_phi_mh(state, (loc, scale, self.reg_prior.t_proposal_dof), rng, log_prior)
        self.counts["phi"][0] += int(ok)
        self.counts["phi"][1] += 1
        vc = VolCoeffs.from_stacked(intercept, phi, var, self.dataset.n_individuals)
        return state.evolve(volcoeffs=vc, scales=_replace(state.scales, phi_acf=phi.copy()))

    def factor(self, state, rng):
        if self.p == 0:
            return state
        ds = self.dataset
        lam, acc, att = sample_loadings(ds, state, self.load_prior, rng)
        self.counts["loadings"][0] += acc
        self.counts["loadings"][1] += att
        state = state.evolve(loadings=lam)
        state = state.evolve(factors=sample_factors(ds, state, rng))
        if self.config.factor_shift:
            state = sample_factor_shift(ds, state, rng)
        sl = sample_sigma_lambda(ds, state, self.load_prior, rng)
        return state.evolve(scales=_replace(state.scales, sigma_lambda=sl))

    def volatility(self, state, rng):
        ds = self.dataset
        z = linearized_observations(ds, state)
        s = sample_mixture_indicators(z - state.logvols.stacked(), KSC_TABLE, rng)
        state = state.evolve(mixture_indicators=s)
        view = build_state_space(ds, state, z=z)
        vp = self.vol_prior
        moments = forward_filter(view, vp.init_mean, np.full(view.n_states, vp.init_var))
        paths = backward_sample(moments, view, rng)
        state = state.evolve(logvols=paths)
        vc = sample_vol_coeffs(paths, vp, rng, self.config.stationarity_retry_budget)
        _, slope, _ = vc.stacked()
        return state.evolve(volcoeffs=vc, scales=_replace(state.scales, phi_acf=slope))

    def sweep(self, state, rng, index):
        for name in BLOCK_ORDER:
            try:
                state = getattr(self, name)(state, rng)
            except Exception as exc:
                raise ChainError(f"sweep {index}, block {name}: {exc}") from exc
        return state


def _replace(obj, **kw):
    from dataclasses import replace

    return replace(obj, **kw)


# ---------------------------------------------------------------- traces


def trace_names(dataset: PanelDataset, n_factors: int) -> list:
    ids, covs = dataset.individual_ids, dataset.covariate_names
    p = n_factors
    names = [f"beta[{i},{c}]" for i in ids for c in covs]
    names += [f"lambda[{i},{j + 1}]" for a, i in enumerate(ids) for j in range(min(a + 1, p))]
    names += [f"alpha0[{i}]" for i in ids] + [f"alpha1[{i}]" for i in ids]
    names += [f"sigma2_v[{i}]" for i in ids]
    names += [f"phi0[{j + 1}]" for j in range(p)] + [f"phi1[{j + 1}]" for j in range(p)]
    names += [f"sigma2_w[{j + 1}]" for j in range(p)]
    names += [f"vartheta[{i}]" for i in ids]
    names += [f"mu_beta[{c}]" for c in covs]
    names += ["sigma2_err", "delta_sigma", "sigma_lambda"]
    return names


def trace_row(state: ParameterState) -> np.ndarray:
    lam = state.lam
    n, p = lam.shape
    free = np.concatenate([lam[a, : min(a + 1, p)] for a in range(n)]) if p else np.zeros(0)
    vc, sc = state.volcoeffs, state.scales
    mu = state.coeffs.mu_beta
    mu = np.full(state.beta.shape[1], np.nan) if mu is None else np.asarray(mu, float)
    return np.concatenate([
        state.beta.ravel(), free,
        vc.alpha0, vc.alpha1, vc.sigma2_v, vc.phi0, vc.phi1, vc.sigma2_w,
        sc.vartheta, mu,
        [sc.sigma2_err[0], sc.delta_sigma, sc.sigma_lambda],
    ])


# ---------------------------------------------------------------- checkpoint

_STATE_ARRAYS = {
    "beta": ("coeffs", "beta"), "mu_beta": ("coeffs", "mu_beta"), "v_beta_inv": ("coeffs", "v_beta_inv"),
    "lam": ("loadings", "lam"), "f": ("factors", "f"), "h": ("logvols", "h"), "q": ("logvols", "q"),
    "alpha0": ("volcoeffs", "alpha0"), "alpha1": ("volcoeffs", "alpha1"), "phi0": ("volcoeffs", "phi0"),
    "phi1": ("volcoeffs", "phi1"), "sigma2_v": ("volcoeffs", "sigma2_v"), "sigma2_w": ("volcoeffs", "sigma2_w"),
    "sigma2_err": ("scales", "sigma2_err"), "vartheta": ("scales", "vartheta"), "phi_acf": ("scales", "phi_acf"),
}


def state_to_arrays(state: ParameterState) -> dict:
    out = {k: np.asarray(getattr(getattr(state, a), b)) for k, (a, b) in _STATE_ARRAYS.items()}
    out["delta_sigma"] = np.asarray(state.scales.delta_sigma)
    out["sigma_lambda"] = np.asarray(state.scales.sigma_lambda)
    out["mixture_indicators"] = np.asarray(state.mixture_indicators)
    return out


def state_from_arrays(d) -> ParameterState:
    g = {k: np.array(d[k]) for k in _STATE_ARRAYS}
    return ParameterState(
        coeffs=RegressionCoeffs(g["beta"], g["mu_beta"], g["v_beta_inv"]),
        loadings=LoadingMatrix(g["lam"]),
        factors=FactorPath(g["f"]),
        logvols=LogVolPaths(g["h"], g["q"]),
        volcoeffs=VolCoeffs(g["alpha0"], g["alpha1"], g["phi0"], g["phi1"], g["sigma2_v"], g["sigma2_w"]),
        scales=ScaleParams(g["sigma2_err"], g["vartheta"], float(d["delta_sigma"]), g["phi_acf"],
                           float(d["sigma_lambda"])),
        mixture_indicators=np.array(d["mixture_indicators"]),
    )


def _atomic_savez(path, **arrays):
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def save_checkpoint(path, sweep, state, rng, traces, sweeps, path_store, path_sweeps, counts, chash):
    """
    Checkpoint layout (.npz): state arrays under ``state/<name>``, retained
    traces and path snapshots so far, plus a JSON ``meta`` entry with the
    completed sweep count, the generator state, M-H counters and the
    config hash.
    """
    meta = {
        "sweep": int(sweep),
        "rng_state": rng.bit_generator.state,
        "counts": counts,
        "config_hash": chash,
    }
    arrays = {f"state/{k}": v for k, v in state_to_arrays(state).items()}
    arrays.update({f"paths/{k}": np.asarray(v) for k, v in path_store.items()})
    _atomic_savez(
        path,
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        traces=np.asarray(traces, float).reshape(len(traces), -1) if traces else np.zeros((0, 0)),
        sweeps=np.asarray(sweeps, dtype=np.int64),
        path_sweeps=np.asarray(path_sweeps, dtype=np.int64),
        **arrays,
    )


def load_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        state = state_from_arrays({k[6:]: z[k] for k in z.files if k.startswith("state/")})
        paths = {k[6:]: list(z[k]) for k in z.files if k.startswith("paths/")}
        traces = list(z["traces"])
        sweeps = list(z["sweeps"])
        path_sweeps = list(z["path_sweeps"])
    return meta, state, traces, sweeps, paths, path_sweeps


# ---------------------------------------------------------------- driver


def run_chain(
    dataset: PanelDataset,
    priors: PriorConfig = None,
    config: ChainConfig = None,
    n_factors: int = 3,
    checkpoint_path=None,
    stop_after: int = None,
    resume: bool = False,
    initial: ParameterState = None,
    progress=None,
):
    """
    Run one chain.

    Parameters
    ----------
    checkpoint_path : path, optional
        Where checkpoints go (every ``config.checkpoint_every`` sweeps and on
        ``stop_after``). With ``resume`` the chain continues from it.
    stop_after : int, optional
        Stop after this many completed sweeps, write a checkpoint and return
        None; used to interrupt a run.
    initial : ParameterState, optional
        Starting state; defaults to :func:`initial_state`.

    Returns
    -------
    ChainOutput, or None when stopped early.
    """
    priors = priors or PriorConfig()
    config = config or ChainConfig()
    dims = dataset.dims(n_factors)
    chash = config_hash(dataset, priors, config, n_factors)
    sampler = _Sampler(dataset, n_factors, priors, config)
    names = trace_names(dataset, n_factors)

    if resume:
        if checkpoint_path is None or not os.path.exists(checkpoint_path):
            raise ChainError("resume requested but no checkpoint found")
        meta, state, traces, sweeps, path_store, path_sweeps = load_checkpoint(checkpoint_path)
        if meta["config_hash"] != chash:
            raise ChainError("checkpoint was written for a different dataset or configuration")
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = meta["rng_state"]
        sampler.counts = {k: list(v) for k, v in meta["counts"].items()}
        start = meta["sweep"]
    else:
        state = initial if initial is not None else initial_state(dataset, n_factors, priors)
        rng = np.random.Generator(np.random.PCG64(int(config.seed)))
        traces, sweeps, path_sweeps = [], [], []
        path_store = {"h": [], "q": [], "f": []}
        start = 0

    n_valid = 0
    for s in range(start + 1, config.n_iter + 1):
        state = sampler.sweep(state, rng, s)
        if s > config.burn_in and (s - config.burn_in) % config.thin == 0:
            problems = validate_state(state, dims)
            if problems:
                raise ChainError(f"sweep {s}: invalid state: {'; '.join(problems)}")
            traces.append(trace_row(state))
            sweeps.append(s)
            if (len(sweeps) - 1) % config.path_thin == 0:
                path_store["h"].append(state.h.copy())
                path_store["q"].append(state.q.copy())
                path_store["f"].append(state.f.copy())
                path_sweeps.append(s)
        if progress is not None:
            progress(s)
        save_now = config.checkpoint_every and s % config.checkpoint_every == 0
        if checkpoint_path is not None and (save_now or s == stop_after):
            save_checkpoint(checkpoint_path, s, state, rng, traces, sweeps, path_store,
                            path_sweeps, sampler.counts, chash)
        if stop_after is not None and s == stop_after and s < config.n_iter:
            return None

    # validate_state already ran on every retained row, including resumed ones
    n_valid = len(sweeps)
    rates = {k: (a / n if n else float("nan")) for k, (a, n) in sampler.counts.items()}
    return ChainOutput(
        names=names,
        traces=np.asarray(traces, float).reshape(len(traces), len(names)),
        sweeps=np.asarray(sweeps, dtype=np.int64),
        config_hash=chash,
        acceptance_rates=rates,
        individual_ids=dataset.individual_ids,
        covariate_names=dataset.covariate_names,
        n_factors=n_factors,
        paths={k: np.asarray(v) for k, v in path_store.items()},
        path_sweeps=np.asarray(path_sweeps, dtype=np.int64),
        final_state=state,
        n_valid_snapshots=n_valid,
    )


# ---------------------------------------------------------------- summaries


@dataclass(frozen=True)
class CoefficientTable:
    """Posterior mean, sd and t = mean / sd of beta, each (N, k)."""

    mean: np.ndarray
    sd: np.ndarray
    t: np.ndarray
    degenerate: np.ndarray
    individual_ids: tuple
    covariate_names: tuple

    def layout(self) -> list:
        """Rows of the printed table: header, then each covariate followed by its t row."""
        rows = [[""] + list(self.individual_ids)]
        for a, name in enumerate(self.covariate_names):
            rows.append([name] + list(self.mean[:, a]))
            rows.append(["t"] + list(self.t[:, a]))
        return rows


def summarize_traces(x: np.ndarray):
    """Column-wise (mean, sd, t, degenerate) of a (draws, params) array."""
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ChainError("need at least two retained draws to summarize")
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    degenerate = ~(sd > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(degenerate, np.inf, mean / np.where(degenerate, 1.0, sd))
    return mean, sd, t, degenerate


def summarize(output: ChainOutput) -> CoefficientTable:
    if output.traces.shape[0] == 0:
        raise ChainError("empty chain")
    n, k = len(output.individual_ids), len(output.covariate_names)
    mean, sd, t, deg = summarize_traces(output.block("beta"))
    return CoefficientTable(
        mean=mean.reshape(n, k), sd=sd.reshape(n, k), t=t.reshape(n, k),
        degenerate=deg.reshape(n, k),
        individual_ids=tuple(output.individual_ids), covariate_names=tuple(output.covariate_names),
    )


@dataclass(frozen=True)
class Diagnostics:
    acf: dict
    running_mean: dict
    degenerate: tuple


def acf(x, lags: int) -> np.ndarray:
    """Sample autocorrelations at lags 1..lags; None for a constant trace."""
    x = np.asarray(x, float)
    d = x - x.mean()
    denom = np.dot(d, d)
    if not denom > 0:
        return None
    return np.array([np.dot(d[:-l], d[l:]) / denom for l in range(1, lags + 1)])


def diagnostics(output, lags: int = 20) -> Diagnostics:
    """ACF and running means per scalar trace; accepts ChainOutput or {name: trace}."""
    if isinstance(output, ChainOutput):
        series = {n: output.traces[:, j] for j, n in enumerate(output.names)}
    else:
        series = {n: np.asarray(v, float) for n, v in output.items()}
    out_acf, out_rm, degenerate = {}, {}, []
    for name, x in series.items():
        if len(x) < lags + 2:
            raise ChainError(f"trace {name!r} has {len(x)} draws; need at least {lags + 2}")
        out_rm[name] = np.cumsum(x) / np.arange(1, len(x) + 1)
        a = acf(x, lags)
        if a is None:
            degenerate.append(name)
            a = np.full(lags, np.nan)
        out_acf[name] = a
    return Diagnostics(acf=out_acf, running_mean=out_rm, degenerate=tuple(degenerate))
