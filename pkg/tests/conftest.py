import numpy as np
import pytest

from pdfsv.model import (
    FactorPath,
    LoadingMatrix,
    LogVolPaths,
    PanelDataset,
    ParameterState,
    RegressionCoeffs,
    ScaleParams,
    VolCoeffs,
    upper_triangle_mask,
)


def make_state(rng, n=4, t=12, k=2, p=2, indicators=True):
    """Random state that satisfies every identification and stationarity constraint."""
    lam = rng.normal(0.8, 0.3, size=(n, p))
    lam[upper_triangle_mask(n, p)] = 0.0
    d = np.arange(min(n, p))
    lam[d, d] = np.abs(lam[d, d]) + 0.1
    return ParameterState(
        coeffs=RegressionCoeffs(rng.normal(0.0, 0.5, size=(n, k)), np.zeros(k), np.eye(k)),
        loadings=LoadingMatrix(lam),
        factors=FactorPath(rng.normal(size=(p, t))),
        logvols=LogVolPaths(rng.normal(0.0, 0.5, size=(n, t)), rng.normal(0.0, 0.5, size=(p, t))),
        volcoeffs=VolCoeffs(
            rng.normal(0.0, 0.1, n), rng.uniform(-0.9, 0.9, n),
            rng.normal(0.0, 0.1, p), rng.uniform(-0.9, 0.9, p),
            rng.uniform(0.1, 1.0, n), rng.uniform(0.1, 1.0, p),
        ),
        scales=ScaleParams(np.ones(n), np.ones(n), 1.0, None, 1.0),
        mixture_indicators=rng.integers(1, 8, size=(n + p, t)).astype(np.int8) if indicators else None,
    )


def make_dataset(rng, n=4, t=12, k=2):
    x = rng.normal(size=(n, t, k))
    x[:, :, 0] = 1.0
    return PanelDataset(returns=rng.normal(size=(n, t)), covariates=x)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture
def report(capsys):
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def _report(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n[acceptance] {line}")
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
