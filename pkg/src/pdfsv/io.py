"""
Panel CSV ingestion, run manifests and result persistence.

Panels are long-format CSV files with a header row
``individual_id,period,return,<covariate 1>,...,<covariate k>``. Every
number written by this module uses 17 significant digits so that reading
a file back reproduces the stored doubles exactly. All files are written
to a temporary name and then renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from . import __version__
from .chain import ChainConfig, ChainOutput, CoefficientTable, PriorConfig, dataset_digest
from .dgp import GroundTruth
from .model import ModelError, PanelDataset

ID_COLUMNS = ("individual_id", "period", "return")
DRAWS_FILE = "draws.csv"
SUMMARY_CSV = "summary.csv"
SUMMARY_JSON = "summary.json"
MANIFEST_FILE = "manifest.json"


class PanelFormatError(ModelError):
    """Malformed panel file."""


class SchemaError(PanelFormatError):
    """Header does not match the declared layout."""


class ContinuityError(PanelFormatError):
    """A (individual, period) cell is missing or the period sequence has a gap."""


class OutputError(OSError):
    """Reading or writing an artifact failed; the message names the path."""


def fmt(x) -> str:
    """17-significant-digit decimal text of a float."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def write_text_atomic(path, text: str):
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    try:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _read_text(path) -> str:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc.strerror or exc}") from exc


def ensure_dir(directory) -> str:
    directory = os.fspath(directory)
    if not directory:
        raise OutputError("output directory path is empty")
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {directory}: {exc.strerror or exc}") from exc
    return directory


# ---------------------------------------------------------------- panels


def _parse_float(text, what, where):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise PanelFormatError(f"{where}: {what} value {text!r} is not a number") from None


def load_panel_csv(path, declared_k: int = None) -> PanelDataset:
    """
    Read a long-format panel into a dense N x T x k dataset.

    Individuals keep their order of first appearance; periods are sorted.
    With ``declared_k=None`` every column after ``return`` is a covariate.

    Raises
    ------
    SchemaError
        Header is missing the id columns or has a number of covariate
        columns different from ``declared_k``.
    ContinuityError
        A cell (individual, period) is absent, or the period labels are
        not consecutive integers.
    PanelFormatError
        Duplicate cells or unparsable values.
    """
    text = _read_text(path)
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise SchemaError(f"{path}: empty file, header row required")
    header = [c.strip() for c in rows[0]]
    if tuple(header[:3]) != ID_COLUMNS:
        raise SchemaError(f"{path}: header must start with {','.join(ID_COLUMNS)}, got {','.join(header[:3])}")
    names = header[3:]
    if not names:
        raise SchemaError(f"{path}: no covariate columns")
    if declared_k is not None and len(names) != int(declared_k):
        raise SchemaError(f"{path}: found {len(names)} covariate columns, declared k = {declared_k}")

    ids, cells = [], {}
    seen_ids = set()
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}, line {line_no}: expected {len(header)} fields, got {len(row)}")
        ident = row[0].strip()
        try:
            period = int(row[1])
        except ValueError:
            raise PanelFormatError(f"{path}, line {line_no}: period {row[1]!r} is not an integer") from None
        where = f"{path}, cell ({ident!r}, {period})"
        key = (ident, period)
        if key in cells:
            raise PanelFormatError(f"{where}: duplicate row")
        values = [_parse_float(v, c, where) for v, c in zip(row[2:], header[2:])]
        cells[key] = values
        if ident not in seen_ids:
            seen_ids.add(ident)
            ids.append(ident)
    if not cells:
        raise SchemaError(f"{path}: no data rows")

    periods = sorted({p for _, p in cells})
    for a, b in zip(periods, periods[1:]):
        if b != a + 1:
            raise ContinuityError(
                f"{path}: missing cell ({ids[0]!r}, {a + 1}); period sequence jumps from {a} to {b}"
                " and consecutive periods are required"
            )
    n, t, k = len(ids), len(periods), len(names)
    r = np.empty((n, t))
    x = np.empty((n, t, k))
    for i, ident in enumerate(ids):
        for s, period in enumerate(periods):
            values = cells.get((ident, period))
            if values is None:
                raise ContinuityError(f"{path}: missing cell ({ident!r}, {period})")
            r[i, s] = values[0]
            x[i, s] = values[1:]
    return PanelDataset(
        returns=r, covariates=x, period_index=np.asarray(periods),
        individual_ids=tuple(ids), covariate_names=tuple(names),
    )


def write_panel_csv(dataset: PanelDataset, path):
    rows = [list(ID_COLUMNS) + list(dataset.covariate_names)]
    for i, ident in enumerate(dataset.individual_ids):
        for s, period in enumerate(dataset.period_index):
            rows.append([ident, int(period), fmt(dataset.returns[i, s])] + [fmt(v) for v in dataset.covariates[i, s]])
    write_text_atomic(path, _csv_text(rows))


def _arr(a):
    a = np.asarray(a, float)
    return [_arr(v) for v in a] if a.ndim > 1 else [float(v) for v in a]


def ground_truth_dict(truth: GroundTruth, dataset: PanelDataset) -> dict:
    s = truth.state
    vc = s.volcoeffs
    return {
        "individual_ids": list(dataset.individual_ids),
        "covariate_names": list(dataset.covariate_names),
        "beta": _arr(s.beta),
        "lambda": _arr(s.lam),
        "f": _arr(s.f),
        "h": _arr(s.h),
        "q": _arr(s.q),
        "alpha0": _arr(vc.alpha0), "alpha1": _arr(vc.alpha1), "sigma2_v": _arr(vc.sigma2_v),
        "phi0": _arr(vc.phi0), "phi1": _arr(vc.phi1), "sigma2_w": _arr(vc.sigma2_w),
    }


def write_ground_truth(truth: GroundTruth, dataset: PanelDataset, path):
    write_text_atomic(path, json_text(ground_truth_dict(truth, dataset)))


def read_json(path) -> dict:
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise OutputError(f"cannot parse {path}: {exc}") from exc


# ---------------------------------------------------------------- configs


def load_prior_config(path) -> PriorConfig:
    """PriorConfig from a JSON object; missing fields take their defaults."""
    return PriorConfig.from_dict(read_json(path)) if path else PriorConfig()


def load_chain_config(path) -> ChainConfig:
    """ChainConfig from a JSON object; missing fields take their defaults."""
    return ChainConfig.from_dict(read_json(path)) if path else ChainConfig()


# ---------------------------------------------------------------- outputs


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to repeat an estimate run."""

    dataset_digest: str
    priors: dict
    chain: dict
    n_factors: int
    seed: int
    no_intercept: bool = False
    scenario: str = None
    data_path: str = None
    config_hash: str = None
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunManifest":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ModelError(f"unknown manifest field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def for_run(cls, dataset, priors: PriorConfig, chain: ChainConfig, n_factors: int, **kw):
        return cls(
            dataset_digest=dataset_digest(dataset), priors=priors.to_dict(), chain=chain.to_dict(),
            n_factors=int(n_factors), seed=int(chain.seed), **kw,
        )


def _json_float(x):
    x = float(x)
    return x if math.isfinite(x) else None


def summary_dict(output: ChainOutput, table: CoefficientTable) -> dict:
    ids, covs = table.individual_ids, table.covariate_names
    coef = {
        ident: {
            c: {
                "mean": _json_float(table.mean[i, a]),
                "sd": _json_float(table.sd[i, a]),
                "t": _json_float(table.t[i, a]),
                "degenerate": bool(table.degenerate[i, a]),
            }
            for a, c in enumerate(covs)
        }
        for i, ident in enumerate(ids)
    }
    x = output.traces
    params = {}
    if x.shape[0] >= 2:
        sd = x.std(axis=0, ddof=1)
        params = {n: {"mean": _json_float(x[:, j].mean()), "sd": _json_float(sd[j])} for j, n in enumerate(output.names)}
    return {
        "config_hash": output.config_hash,
        "n_retained": int(x.shape[0]),
        "n_factors": int(output.n_factors),
        "individual_ids": list(ids),
        "covariate_names": list(covs),
        "acceptance_rates": {k: _json_float(v) for k, v in sorted(output.acceptance_rates.items())},
        "coefficients": coef,
        "parameters": params,
    }


def summary_rows(table: CoefficientTable) -> list:
    """Coefficient table as text cells: (1 + 2k) rows by (1 + N) columns."""
    return [[c if isinstance(c, str) else fmt(c) for c in row] for row in table.layout()]


def write_draws_csv(output: ChainOutput, path):
    lines = ["sweep,parameter,value"]
    quoted = [f'"{n}"' if ("," in n or '"' in n) else n for n in output.names]
    for s, row in zip(output.sweeps, output.traces):
        lines.extend(f"{int(s)},{n},{fmt(v)}" for n, v in zip(quoted, row))
    write_text_atomic(path, "\n".join(lines) + "\n")


def read_draws_csv(path):
    """Inverse of :func:`write_draws_csv`: (names, sweeps, traces)."""
    reader = csv.reader(io.StringIO(_read_text(path)))
    header = next(reader, None)
    if header != ["sweep", "parameter", "value"]:
        raise PanelFormatError(f"{path}: not a draws file")
    names, index, sweeps, values = [], {}, [], {}
    for row in reader:
        if not row:
            continue
        s, name, v = int(row[0]), row[1], float(row[2])
        if name not in index:
            index[name] = len(names)
            names.append(name)
        if s not in values:
            sweeps.append(s)
            values[s] = {}
        values[s][name] = v
    traces = np.empty((len(sweeps), len(names)))
    for r, s in enumerate(sweeps):
        row = values[s]
        if len(row) != len(names):
            raise PanelFormatError(f"{path}: sweep {s} has {len(row)} parameters, expected {len(names)}")
        traces[r] = [row[n] for n in names]
    return names, np.asarray(sweeps, dtype=np.int64), traces


def write_outputs(output: ChainOutput, table: CoefficientTable, manifest: RunManifest, directory) -> dict:
    """
    Write draws, summaries and the manifest into ``directory``.

    Returns a mapping from artifact kind to file path.
    """
    directory = ensure_dir(directory)
    paths = {
        "draws": os.path.join(directory, DRAWS_FILE),
        "summary_csv": os.path.join(directory, SUMMARY_CSV),
        "summary_json": os.path.join(directory, SUMMARY_JSON),
        "manifest": os.path.join(directory, MANIFEST_FILE),
    }
    write_draws_csv(output, paths["draws"])
    write_text_atomic(paths["summary_csv"], _csv_text(summary_rows(table)))
    write_text_atomic(paths["summary_json"], json_text(summary_dict(output, table)))
    write_text_atomic(paths["manifest"], json_text(manifest.to_dict()))
    return paths


def load_chain_dir(directory) -> ChainOutput:
    """Rebuild the scalar part of a ChainOutput from a directory written by :func:`write_outputs`."""
    names, sweeps, traces = read_draws_csv(os.path.join(directory, DRAWS_FILE))
    summary_path = os.path.join(directory, SUMMARY_JSON)
    meta = read_json(summary_path) if os.path.exists(summary_path) else {}
    if "individual_ids" in meta:
        ids, covs = tuple(meta["individual_ids"]), tuple(meta["covariate_names"])
    else:
        # ambiguous only when an id or covariate name itself contains a comma
        beta = [n[len("beta["):-1].rsplit(",", 1) for n in names if n.startswith("beta[")]
        ids = tuple(dict.fromkeys(b[0] for b in beta))
        covs = tuple(dict.fromkeys(b[1] for b in beta))
    return ChainOutput(
        names=names, traces=traces, sweeps=sweeps,
        config_hash=meta.get("config_hash", ""),
        acceptance_rates={k: (float("nan") if v is None else v) for k, v in meta.get("acceptance_rates", {}).items()},
        individual_ids=ids, covariate_names=covs, n_factors=int(meta.get("n_factors", 0)),
    )
