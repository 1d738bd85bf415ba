"""
Command-line entry point.

    pdfsv simulate --scenario M1 --seed 7 --out DIR
    pdfsv select-factors --data panel.csv --p-max 8
    pdfsv estimate --data panel.csv --factors 3 --out DIR [--priors F] [--chain F] [--no-intercept]
    pdfsv summarize --chain DIR
    pdfsv standardize --data panel.csv --out scaled.csv
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .chain import ChainError, dataset_digest, diagnostics, run_chain, summarize
from .dgp import is_intercept_column, scenario_preset, simulate_panel, standardize_covariates
from .factor import icp_values
from .io import (
    OutputError,
    RunManifest,
    ensure_dir,
    fmt,
    json_text,
    load_chain_config,
    load_chain_dir,
    load_panel_csv,
    load_prior_config,
    read_json,
    summary_rows,
    write_ground_truth,
    write_outputs,
    write_panel_csv,
    write_text_atomic,
)
from .model import ModelError, PanelDataset

PANEL_FILE = "panel.csv"
TRUTH_FILE = "ground_truth.json"
SIMULATION_FILE = "simulation.json"


def _intercept_columns(dataset: PanelDataset) -> list:
    return [a for a in range(dataset.n_covariates) if is_intercept_column(dataset.covariates[:, :, a])]


def prepare_design(dataset: PanelDataset, no_intercept: bool) -> PanelDataset:
    """
    Add a leading ``const`` column unless one is present, or with
    ``no_intercept`` drop every all-ones column.
    """
    ones = _intercept_columns(dataset)
    if no_intercept:
        if not ones:
            return dataset
        keep = [a for a in range(dataset.n_covariates) if a not in ones]
        if not keep:
            raise ModelError("--no-intercept leaves no covariates")
        return replace(
            dataset,
            covariates=dataset.covariates[:, :, keep],
            covariate_names=tuple(dataset.covariate_names[a] for a in keep),
        )
    if ones:
        return dataset
    n, t, _ = dataset.covariates.shape
    return replace(
        dataset,
        covariates=np.concatenate([np.ones((n, t, 1)), dataset.covariates], axis=2),
        covariate_names=("const",) + dataset.covariate_names,
    )


def _scenario_for(data_path, dataset) -> str:
    sim = os.path.join(os.path.dirname(os.path.abspath(data_path)), SIMULATION_FILE)
    if os.path.exists(sim):
        meta = read_json(sim)
        if meta.get("dataset_digest") == dataset_digest(dataset):
            return meta.get("scenario")
    return None


def cmd_simulate(args) -> int:
    config = scenario_preset(args.scenario, seed=args.seed, n_periods=args.periods)
    dataset, truth = simulate_panel(config)
    out = ensure_dir(args.out)
    write_panel_csv(dataset, os.path.join(out, PANEL_FILE))
    write_ground_truth(truth, dataset, os.path.join(out, TRUTH_FILE))
    d = config.dims
    meta = {
        "scenario": config.scenario,
        "seed": int(args.seed),
        "dims": {"N": d.n_individuals, "T": d.n_periods, "k": d.n_covariates, "p": d.n_factors},
        "dataset_digest": dataset_digest(dataset),
        "version": __version__,
    }
    write_text_atomic(os.path.join(out, SIMULATION_FILE), json_text(meta))
    print(f"wrote {PANEL_FILE}, {TRUTH_FILE} and {SIMULATION_FILE} to {out}")
    return 0


def cmd_select_factors(args) -> int:
    dataset = load_panel_csv(args.data, args.k)
    icp, _ = icp_values(dataset, args.p_max)
    if args.verbose:
        for j, v in enumerate(icp):
            print(f"ICp1({j}) = {v:.6f}", file=sys.stderr)
    print(int(np.argmin(icp)))
    return 0


def cmd_standardize(args) -> int:
    dataset = load_panel_csv(args.data, args.k)
    write_panel_csv(standardize_covariates(dataset, skip_intercept=True), args.out)
    return 0


def cmd_estimate(args) -> int:
    raw = load_panel_csv(args.data, args.k)
    dataset = prepare_design(raw, args.no_intercept)
    priors = load_prior_config(args.priors)
    chain = load_chain_config(args.chain)
    if args.seed is not None:
        chain = replace(chain, seed=args.seed)
    p = args.factors
    if p is None:
        icp, _ = icp_values(dataset, min(args.p_max, min(dataset.returns.shape) - 1))
        p = int(np.argmin(icp))
    out = ensure_dir(args.out)

    def progress(s):
        if not args.quiet and (s % 1000 == 0 or s == chain.n_iter):
            print(f"sweep {s}/{chain.n_iter}", file=sys.stderr)

    output = run_chain(dataset, priors, chain, n_factors=p, progress=progress)
    table = summarize(output)
    manifest = RunManifest.for_run(
        dataset, priors, chain, p,
        no_intercept=bool(args.no_intercept),
        scenario=_scenario_for(args.data, raw),
        data_path=os.path.abspath(args.data),
        config_hash=output.config_hash,
    )
    write_outputs(output, table, manifest, out)
    _print_table(summary_rows(table))
    return 0


def _print_table(rows):
    width = max(len(c) for row in rows for c in row)
    width = min(max(width, 8), 12)
    for row in rows:
        cells = [row[0].ljust(8)] + [_short(c).rjust(width) for c in row[1:]]
        print(" ".join(cells))


def _short(cell):
    try:
        return f"{float(cell):.4g}"
    except ValueError:
        return cell


def cmd_summarize(args) -> int:
    output = load_chain_dir(args.chain)
    table = summarize(output)
    _print_table(summary_rows(table))
    if output.acceptance_rates:
        rates = ", ".join(f"{k} {fmt(v)}" for k, v in sorted(output.acceptance_rates.items()))
        print(f"acceptance: {rates}")
    lags = min(args.lags, output.traces.shape[0] - 2)
    if lags >= 1:
        diag = diagnostics(output, lags)
        print(f"retained draws: {output.traces.shape[0]}; ACF at lags 1 and {lags}:")
        for name in output.names:
            a = diag.acf[name]
            flag = "  degenerate" if name in diag.degenerate else ""
            print(f"  {name:<24} {a[0]: .3f} {a[-1]: .3f}{flag}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdfsv", description="Bayesian panel factor model with stochastic volatility.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("simulate", help="simulate a synthetic panel with known parameters")
    p.add_argument("--scenario", required=True, help="dimension preset M1..M8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--periods", type=int, default=None, help="override the preset T")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select-factors", help="choose the number of factors by ICp1")
    p.add_argument("--data", required=True, help="long-format panel CSV")
    p.add_argument("--p-max", type=int, required=True)
    p.add_argument("--k", type=int, default=None, help="declared number of covariate columns")
    p.add_argument("--verbose", action="store_true", help="print every ICp1 value to stderr")
    p.set_defaults(func=cmd_select_factors)

    p = sub.add_parser("estimate", help="run the sampler and write draws and summaries")
    p.add_argument("--data", required=True, help="long-format panel CSV")
    p.add_argument("--factors", type=int, default=None, help="number of factors (default: ICp1 choice)")
    p.add_argument("--p-max", type=int, default=8, help="upper bound for the ICp1 choice")
    p.add_argument("--priors", default=None, help="JSON prior configuration")
    p.add_argument("--chain", default=None, help="JSON chain configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-intercept", action="store_true", help="fit the model without a constant")
    p.add_argument("--seed", type=int, default=None, help="overrides the chain configuration seed")
    p.add_argument("--k", type=int, default=None, help="declared number of covariate columns")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("summarize", help="summarize a finished run")
    p.add_argument("--chain", required=True, help="output directory of an estimate run")
    p.add_argument("--lags", type=int, default=20)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("standardize", help="rescale covariates to mean 0 and sd 1")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--k", type=int, default=None, help="declared number of covariate columns")
    p.set_defaults(func=cmd_standardize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ModelError, ChainError, OutputError) as exc:
        print(f"pdfsv {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
