import json

import numpy as np
import pytest

from pdfsv.chain import ChainConfig, ChainOutput, PriorConfig, dataset_digest, summarize
from pdfsv.dgp import scenario_preset, simulate_panel
from pdfsv.io import (
    ContinuityError,
    OutputError,
    PanelFormatError,
    RunManifest,
    SchemaError,
    ensure_dir,
    fmt,
    load_chain_config,
    load_chain_dir,
    load_panel_csv,
    load_prior_config,
    read_draws_csv,
    write_outputs,
    write_panel_csv,
)
from pdfsv.model import ModelError


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def _good_lines(periods=(1, 2, 3)):
    lines = ["individual_id,period,return,x1,x2"]
    for ident in ("A", "B"):
        for p in periods:
            lines.append(f"{ident},{p},0.{p},1,{p * 2}")
    return lines


def test_well_formed_file(tmp_path):
    ds = load_panel_csv(_write(tmp_path / "p.csv", _good_lines()), declared_k=2)
    assert (ds.n_individuals, ds.n_periods, ds.n_covariates) == (2, 3, 2)
    assert ds.individual_ids == ("A", "B")
    assert ds.covariate_names == ("x1", "x2")
    np.testing.assert_array_equal(ds.period_index, [1, 2, 3])
    np.testing.assert_allclose(ds.returns[1], [0.1, 0.2, 0.3])
    np.testing.assert_allclose(ds.covariates[0, :, 1], [2, 4, 6])


def test_rows_may_come_in_any_order(tmp_path):
    lines = _good_lines()
    shuffled = [lines[0]] + lines[1:][::-1]
    ds = load_panel_csv(_write(tmp_path / "p.csv", shuffled))
    assert ds.individual_ids == ("B", "A")
    np.testing.assert_array_equal(ds.period_index, [1, 2, 3])
    np.testing.assert_allclose(ds.returns[1], [0.1, 0.2, 0.3])


def test_missing_cell_is_named(tmp_path):
    lines = _good_lines(periods=(3, 4, 5, 6))
    lines = [l for l in lines if l != "A,5,0.5,1,10"]
    with pytest.raises(ContinuityError, match=r"\('A', 5\)"):
        load_panel_csv(_write(tmp_path / "p.csv", lines))


def test_gap_in_periods_is_a_continuity_error(tmp_path):
    lines = _good_lines(periods=(1, 2, 4))
    with pytest.raises(ContinuityError, match="consecutive"):
        load_panel_csv(_write(tmp_path / "p.csv", lines))


def test_declared_k_mismatch(tmp_path):
    lines = ["individual_id,period,return,x1,x2,x3", "A,1,0.1,1,2,3", "A,2,0.1,1,2,3"]
    with pytest.raises(SchemaError, match="declared k = 2"):
        load_panel_csv(_write(tmp_path / "p.csv", lines), declared_k=2)


def test_bad_header_and_values(tmp_path):
    with pytest.raises(SchemaError):
        load_panel_csv(_write(tmp_path / "a.csv", ["id,period,return,x1", "A,1,0.1,1"]))
    with pytest.raises(SchemaError):
        load_panel_csv(_write(tmp_path / "b.csv", ["individual_id,period,return", "A,1,0.1"]))
    with pytest.raises(PanelFormatError):
        load_panel_csv(_write(tmp_path / "c.csv", ["individual_id,period,return,x1", "A,1,abc,1", "A,2,0.1,1"]))
    with pytest.raises(PanelFormatError, match="duplicate"):
        load_panel_csv(_write(tmp_path / "d.csv", ["individual_id,period,return,x1", "A,1,0.1,1", "A,1,0.2,1"]))
    with pytest.raises(OutputError):
        load_panel_csv(tmp_path / "missing.csv")


def test_panel_round_trip_is_identity(tmp_path):
    ds, _ = simulate_panel(scenario_preset("M1", seed=3))
    path = tmp_path / "panel.csv"
    write_panel_csv(ds, path)
    back = load_panel_csv(path, declared_k=3)
    assert back.returns.tobytes() == ds.returns.tobytes()
    assert back.covariates.tobytes() == ds.covariates.tobytes()
    assert back.individual_ids == ds.individual_ids
    assert back.covariate_names == ds.covariate_names
    assert dataset_digest(back) == dataset_digest(ds)


def test_fmt_round_trips_floats():
    rng = np.random.default_rng(0)
    for x in np.concatenate([rng.normal(size=1000), rng.normal(size=100) * 1e300, [5e-324, -0.0, 1 / 3]]):
        assert float(fmt(x)) == x
    assert fmt(np.inf) == "inf" and fmt(-np.inf) == "-inf" and fmt(np.nan) == "nan"


def _fake_output(n_draws=100, ids=("s1", "s2"), covs=("const", "x,1")):
    rng = np.random.default_rng(4)
    names = [f"beta[{i},{c}]" for i in ids for c in covs] + ["sigma2_err"]
    return ChainOutput(
        names=names, traces=rng.normal(size=(n_draws, len(names))) * np.logspace(-8, 8, len(names)),
        sweeps=np.arange(11, 11 + n_draws), config_hash="abc", acceptance_rates={"phi": 0.5, "loadings": float("nan")},
        individual_ids=ids, covariate_names=covs, n_factors=2,
    )


def _manifest():
    return RunManifest(dataset_digest="d", priors=PriorConfig().to_dict(), chain=ChainConfig().to_dict(),
                       n_factors=2, seed=0)


def test_draws_round_trip_bitwise(tmp_path):
    out = _fake_output()
    paths = write_outputs(out, summarize(out), _manifest(), tmp_path / "run")
    names, sweeps, traces = read_draws_csv(paths["draws"])
    assert names == out.names
    np.testing.assert_array_equal(sweeps, out.sweeps)
    assert traces.tobytes() == out.traces.tobytes()
    lines = open(paths["draws"]).read().splitlines()
    assert lines[0] == "sweep,parameter,value"
    assert len(lines) == 1 + 100 * len(out.names)


def test_summary_csv_layout(tmp_path):
    ids = tuple(f"s{i}" for i in range(10))
    out = _fake_output(ids=ids, covs=("const", "x1", "x2"))
    paths = write_outputs(out, summarize(out), _manifest(), tmp_path)
    rows = [l.split(",") for l in open(paths["summary_csv"]).read().splitlines()]
    assert len(rows) == 1 + 2 * 3
    assert all(len(r) == 1 + 10 for r in rows)
    assert rows[0][1:] == list(ids)


def test_summary_json_and_manifest(tmp_path):
    out = _fake_output()
    paths = write_outputs(out, summarize(out), _manifest(), tmp_path)
    summary = json.loads(open(paths["summary_json"]).read())
    assert summary["n_retained"] == 100 and summary["config_hash"] == "abc"
    assert summary["acceptance_rates"]["loadings"] is None
    mean = summary["coefficients"]["s2"]["x,1"]["mean"]
    assert mean == out.block("beta")[:, 3].mean()
    manifest = RunManifest.from_dict(json.loads(open(paths["manifest"]).read()))
    assert manifest == _manifest()


def test_load_chain_dir_restores_order(tmp_path):
    out = _fake_output(ids=("zeta", "alpha"))
    write_outputs(out, summarize(out), _manifest(), tmp_path)
    back = load_chain_dir(tmp_path)
    assert back.individual_ids == ("zeta", "alpha")
    assert back.covariate_names == ("const", "x,1")
    assert back.config_hash == "abc" and back.n_factors == 2
    assert np.isnan(back.acceptance_rates["loadings"])


def test_empty_output_directory_is_an_error():
    with pytest.raises(OutputError, match="empty"):
        ensure_dir("")
    out = _fake_output()
    with pytest.raises(OutputError):
        write_outputs(out, summarize(out), _manifest(), "")


def test_unwritable_path_names_it(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OutputError, match="file"):
        ensure_dir(blocker / "sub")


def test_config_files(tmp_path):
    (tmp_path / "chain.json").write_text(json.dumps({"n_iter": 50, "burn_in": 10, "seed": 3}))
    (tmp_path / "priors.json").write_text(json.dumps({}))
    chain = load_chain_config(tmp_path / "chain.json")
    assert (chain.n_iter, chain.burn_in, chain.seed, chain.thin) == (50, 10, 3, 1)
    assert load_prior_config(tmp_path / "priors.json") == PriorConfig()
    assert load_chain_config(None) == ChainConfig()
    (tmp_path / "bad.json").write_text(json.dumps({"n_sweeps": 5}))
    with pytest.raises(ModelError):
        load_chain_config(tmp_path / "bad.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(OutputError):
        load_prior_config(tmp_path / "broken.json")


def test_manifest_rejects_unknown_fields():
    d = _manifest().to_dict()
    d["colour"] = "red"
    with pytest.raises(ModelError):
        RunManifest.from_dict(d)
