import copy

import numpy as np
from conftest import make_state
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdfsv.dgp import DgpConfig, simulate_panel
from pdfsv.factor import icp_values
from pdfsv.io import fmt, load_panel_csv, write_panel_csv
from pdfsv.model import (
    ModelDims,
    PanelDataset,
    assemble_omega,
    total_parameter_count,
    upper_triangle_mask,
    validate_state,
)
from pdfsv.volatility import StateSpaceView, forward_filter, mixture_probabilities

FAST = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
seeds = st.integers(0, 2**32 - 1)
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@FAST
@given(seed=seeds, n=st.integers(1, 8), p=st.integers(0, 4))
def test_omega_is_symmetric_positive_definite(seed, n, p):
    rng = np.random.default_rng(seed)
    lam = rng.normal(0.0, 2.0, size=(n, p))
    lam[upper_triangle_mask(n, p)] = 0.0
    omega = assemble_omega(lam, rng.normal(0.0, 2.0, p), rng.normal(0.0, 2.0, n))
    np.testing.assert_array_equal(omega, omega.T)
    assert np.all(np.linalg.eigvalsh(omega) > 0)


@FAST
@given(n=st.integers(2, 60), k=st.integers(1, 6), data=st.data())
def test_parameter_count_decomposes(n, k, data):
    p = data.draw(st.integers(0, n - 1))
    dims = ModelDims(n, 10, k, p)
    free_loadings = n * p - p * (p - 1) // 2
    assert total_parameter_count(dims) == k * n + free_loadings - p + 2 * (n + p)
    assert total_parameter_count(ModelDims(n, 10, k, 0)) == k * n + 2 * n


@FAST
@given(seed=seeds, n=st.integers(2, 6), p=st.integers(1, 3), t=st.integers(2, 15))
def test_validate_state_is_pure_and_idempotent(seed, n, p, t):
    p = min(p, n - 1)
    rng = np.random.default_rng(seed)
    state = make_state(rng, n=n, t=t, k=2, p=p)
    if rng.random() < 0.5:
        lam = state.lam.copy()
        lam[0, 0] = -abs(lam[0, 0])
        state = state.evolve(loadings=type(state.loadings)(lam))
    before = copy.deepcopy(state)
    dims = ModelDims(n, t, 2, p)
    first = validate_state(state, dims)
    assert validate_state(state, dims) == first
    np.testing.assert_array_equal(before.lam, state.lam)
    np.testing.assert_array_equal(before.h, state.h)
    np.testing.assert_array_equal(before.beta, state.beta)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 6), p=st.integers(0, 2), t=st.integers(5, 30))
def test_dgp_output_is_always_valid(seed, n, p, t):
    p = min(p, n - 1)
    ds, truth = simulate_panel(DgpConfig(dims=ModelDims(n, t, 2, p), seed=seed))
    assert validate_state(truth.state, ds.dims(p)) == []


@settings(max_examples=300, deadline=None)
@given(x=st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips_any_finite_float(x):
    assert float(fmt(x)) == x


@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    r=arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite),
    k=st.integers(1, 3),
    data=st.data(),
)
def test_panel_csv_round_trip_is_identity(tmp_path_factory, r, k, data):
    n, t = r.shape
    x = data.draw(arrays(np.float64, (n, t, k), elements=finite))
    start = data.draw(st.integers(-5, 2000))
    ds = PanelDataset(returns=r, covariates=x, period_index=np.arange(start, start + t),
                      individual_ids=tuple(f"id{i}" for i in range(n)))
    path = tmp_path_factory.mktemp("rt") / "panel.csv"
    write_panel_csv(ds, path)
    back = load_panel_csv(path, declared_k=k)
    assert back.returns.tobytes() == ds.returns.tobytes()
    assert back.covariates.tobytes() == ds.covariates.tobytes()
    np.testing.assert_array_equal(back.period_index, ds.period_index)
    assert back.individual_ids == ds.individual_ids


@FAST
@given(resid=arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 20)), elements=st.floats(-60, 30)))
def test_mixture_probabilities_form_a_distribution(resid):
    p = mixture_probabilities(resid)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


@FAST
@given(seed=seeds, s=st.integers(1, 4), t=st.integers(1, 20))
def test_univariate_filter_equals_dense_filter(seed, s, t):
    rng = np.random.default_rng(seed)
    view = StateSpaceView(
        z=rng.normal(size=(s, t)), c=rng.normal(size=(s, t)),
        sigma_e=rng.uniform(0.2, 5.0, size=(s, t)),
        alpha=np.column_stack([rng.normal(0, 0.3, s), rng.uniform(-0.99, 0.99, s)]),
        sigma_nu=rng.uniform(0.01, 2.0, s),
    )
    m0, p0 = rng.normal(size=s), rng.uniform(0.5, 20.0, s)
    a = forward_filter(view, m0, p0, method="univariate")
    b = forward_filter(view, m0, p0, method="dense")
    np.testing.assert_allclose(a.m, b.m, atol=1e-10, rtol=0)
    for tt in range(t):
        np.testing.assert_allclose(a.cov(tt), b.cov(tt), atol=1e-10, rtol=0)


@FAST
@given(seed=seeds, n=st.integers(2, 30), t=st.integers(2, 30), p_max=st.integers(1, 6))
def test_icp_residual_variance_is_nonincreasing(seed, n, t, p_max):
    r = np.random.default_rng(seed).standard_t(3, size=(n, t))
    _, v = icp_values(r, min(p_max, min(n, t) - 1))
    assert np.all(np.diff(v) <= 1e-12 * max(v[0], 1.0))
