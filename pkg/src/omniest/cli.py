"""Command line front end: ``simulate``, ``estimate`` and ``report``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  ``OMNIEST_THREADS`` overrides ``--threads``.
"""
from __future__ import annotations

import argparse
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
import hashlib
import json
import logging
import os
from pathlib import Path
import re
import sys
import time

import numpy as np
import pandas as pd

from . import __version__
from .data import CSV_FIXED_COLUMNS, design_view, from_frame, read_frame
from .dropout import DropoutSpec, build_weights, dropout_table, fit_dropout_model, unit_weights
from .errors import (
    ConfigInvalid,
    DataError,
    IncompatibleReports,
    NoDropoutEvents,
    OmniError,
    StrataNotHospitalConstant,
)
from .estimators import BASELINES, fit_baseline, fit_omni
from .inference import DEFAULT_K_GRID, confidence_intervals, omni_inference
from .simulation import ScenarioConfig, run_monte_carlo

log = logging.getLogger("omniest")

MANIFEST = "manifest.json"
COEF_COLUMNS = ("estimator", "coefficient", "estimate", "ase", "lower", "upper", "p_value")
MC_COLUMNS = ("bias_x100", "mcsd_x100", "ase_x100", "cp")
SIGNIFICANCE = 0.05


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config_path, seed, inputs, started: float):
    doc = {
        "command": command,
        "config_path": None if config_path is None else str(config_path),
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "version": __version__,
        "duration_seconds": round(time.monotonic() - started, 3),
    }
    (out_dir / MANIFEST).write_text(json.dumps(doc, indent=2) + "\n")


def _write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def resolve_threads(requested: int | None) -> int:
    env = os.environ.get("OMNIEST_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigInvalid(f"OMNIEST_THREADS must be an integer, got {env!r}") from None
    else:
        n = 1 if requested is None else requested
    if n < 1:
        raise ConfigInvalid("thread count must be >= 1")
    return n


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    started = time.monotonic()
    try:
        cfg = ScenarioConfig.from_json(Path(args.config).read_text())
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {args.config}: {exc.strerror}") from None
    except ConfigInvalid as exc:
        raise ConfigInvalid(f"{args.config}: {exc}") from None
    overrides = {}
    if args.replicates is not None:
        overrides["n_replicates"] = args.replicates
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = replace(cfg, **overrides)
    threads = resolve_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(i):
        log.info("replicate %d/%d done", i + 1, cfg.n_replicates)

    log.info("simulating %s: %d replicates on %d worker(s)", cfg.name, cfg.n_replicates, threads)
    report = run_monte_carlo(cfg, threads=threads, progress=progress)
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text())
    failures = pd.DataFrame(
        [{"estimator": lab, "kind": kind, "count": n} for (lab, kind), n in sorted(report.failures.items())],
        columns=["estimator", "kind", "count"],
    )
    _write_csv(failures, out / "failures.csv")
    write_manifest(out, "simulate", args.config, cfg.seed, [args.config], started)
    sys.stdout.write(report.to_text())
    return 0


# ---------------------------------------------------------------- estimate

@dataclass(frozen=True)
class AnalysisConfig:
    """Options for ``estimate``; JSON keys mirror the field names."""

    covariates: tuple[str, ...] | None = None
    dropout: DropoutSpec | None = field(default_factory=DropoutSpec)
    estimators: tuple[str, ...] = ("OMNI",)
    weight_scheme: str = "W1"
    strata: str | None = None
    kmeans: str = "auto"
    k_grid: tuple[int, ...] = DEFAULT_K_GRID
    seed: int = 0
    level: float = 0.95
    working_correlation: str = "exchangeable"
    drop_zero_weight_hospitals: bool = False

    @classmethod
    def from_dict(cls, doc) -> AnalysisConfig:
        if not isinstance(doc, dict):
            raise ConfigInvalid("analysis config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigInvalid(f"field {unknown[0]!r}: unknown field")
        kw = dict(doc)
        if kw.get("covariates") is not None:
            kw["covariates"] = _str_tuple(kw["covariates"], "covariates")
        if "dropout" in kw and kw["dropout"] is not None:
            d = kw["dropout"]
            if not isinstance(d, dict):
                raise ConfigInvalid("field 'dropout': expected an object or null")
            extra = sorted(set(d) - {"covariates", "lagged_outcome", "stratify_month"})
            if extra:
                raise ConfigInvalid(f"field 'dropout.{extra[0]}': unknown field")
            kw["dropout"] = DropoutSpec(
                covariates=_str_tuple(d.get("covariates", []), "dropout.covariates"),
                lagged_outcome=bool(d.get("lagged_outcome", True)),
                stratify_month=bool(d.get("stratify_month", False)),
            )
        if "estimators" in kw:
            kw["estimators"] = tuple(str(e).upper() for e in _str_tuple(kw["estimators"], "estimators"))
        if "k_grid" in kw:
            try:
                kw["k_grid"] = tuple(int(k) for k in kw["k_grid"])
            except (TypeError, ValueError):
                raise ConfigInvalid("field 'k_grid': expected a list of integers") from None
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self):
        allowed = ("OMNI", *BASELINES)
        if not self.estimators or set(self.estimators) - set(allowed):
            raise ConfigInvalid(f"field 'estimators': must be a nonempty subset of {allowed}")
        if str(self.weight_scheme).upper() not in ("W1", "W2"):
            raise ConfigInvalid("field 'weight_scheme': must be W1 or W2")
        if self.kmeans not in ("on", "off", "auto"):
            raise ConfigInvalid("field 'kmeans': must be on, off or auto")
        if not self.k_grid or min(self.k_grid) < 2:
            raise ConfigInvalid("field 'k_grid': needs at least one k and every k >= 2")
        if not 0 < float(self.level) < 1:
            raise ConfigInvalid("field 'level': must lie in (0, 1)")
        if self.working_correlation not in ("independence", "exchangeable"):
            raise ConfigInvalid("field 'working_correlation': must be independence or exchangeable")
        if self.strata is not None and not isinstance(self.strata, str):
            raise ConfigInvalid("field 'strata': expected a column name or null")


def _str_tuple(value, name) -> tuple[str, ...]:
    if isinstance(value, str) or not isinstance(value, (list, tuple)):
        raise ConfigInvalid(f"field {name!r}: expected a list of names")
    return tuple(str(v) for v in value)


def stratum_label(value) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", str(value)).strip("_") or "blank"


def split_strata(frame: pd.DataFrame, column: str | None) -> list[tuple[str, pd.DataFrame]]:
    """Partition rows by a hospital-level column; the column is removed."""
    if column is None:
        return [("all", frame)]
    if column not in frame.columns:
        raise DataError(f"strata column {column!r} is not in the CSV")
    if column in CSV_FIXED_COLUMNS:
        raise ConfigInvalid(f"field 'strata': {column!r} is a reserved column")
    values = frame[column]
    if values.isna().any():
        row = int(frame.index[np.flatnonzero(values.isna().to_numpy())[0]]) + 2
        raise DataError(f"row {row}: missing strata value")
    per_hospital = values.astype(str).groupby(frame["hospital_id"]).nunique()
    varying = per_hospital[per_hospital > 1]
    if len(varying):
        raise StrataNotHospitalConstant(
            f"strata column {column!r} varies within hospital {varying.index[0]!r}"
        )
    rest = frame.drop(columns=[column])
    out = []
    labels = {}
    for value in sorted(values.astype(str).unique()):
        label = stratum_label(value)
        if label in labels:
            raise DataError(f"strata values {labels[label]!r} and {value!r} share a file label")
        labels[label] = value
        out.append((label, rest[values.astype(str) == value]))
    return out


def estimate_stratum(frame: pd.DataFrame, cfg: AnalysisConfig) -> dict[str, pd.DataFrame]:
    """Fit every configured estimator on one stratum; returns named tables."""
    ds = from_frame(frame)
    view = design_view(ds, cfg.covariates)
    scheme = cfg.weight_scheme.upper()
    dropout = None
    if cfg.dropout is not None:
        try:
            dropout = fit_dropout_model(ds, cfg.dropout)
        except NoDropoutEvents:
            log.warning("no dropout events; using observation probability 1 everywhere")
    weights = build_weights(ds, dropout, scheme) if dropout is not None else unit_weights(ds, scheme)
    pi_source = dropout if dropout is not None else np.ones(ds.observed.shape)

    tables: dict[str, pd.DataFrame] = {}
    if "OMNI" in cfg.estimators:
        fit = fit_omni(view, weights, drop_zero_weight_hospitals=cfg.drop_zero_weight_hospitals)
        inf = omni_inference(fit, dropout, kmeans=cfg.kmeans, k_grid=cfg.k_grid,
                             seed=cfg.seed, level=cfg.level)
        coef = inf.table[list(COEF_COLUMNS[1:])].copy()
        coef.insert(0, "estimator", "OMNI")
        tables["coefficients_OMNI"] = coef
        tables["inference"] = inf.table
        theta = pd.DataFrame({"hospital_id": ds.hospital_ids, "n_patients": ds.cluster_sizes,
                              "theta": fit.theta})
        if inf.clustering is not None:
            theta["cluster"] = inf.clustering.assignments
            theta["stabilized_theta"] = inf.clustering.stabilized_theta
        tables["theta"] = theta
    for which in BASELINES:
        if which not in cfg.estimators:
            continue
        b = fit_baseline(view, None if which == "GEE" else pi_source, which,
                         working_correlation=cfg.working_correlation)
        coef = confidence_intervals(b.beta, b.cov, cfg.level, b.names)
        coef.insert(0, "estimator", which)
        tables[f"coefficients_{which}"] = coef
    tables["dropout"] = dropout_table(ds, dropout, weights)
    if dropout is not None:
        tables["dropout_model"] = dropout.summary()
    return tables


def _estimate_job(job):
    label, frame, cfg = job
    return label, estimate_stratum(frame, cfg)


def cmd_estimate(args) -> int:
    started = time.monotonic()
    cfg = AnalysisConfig.from_dict(_load_json(args.config))
    try:
        frame = read_frame(args.data)
    except OSError as exc:
        raise DataError(f"cannot read data {args.data}: {exc.strerror}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"{args.data}: {exc}") from None
    strata = split_strata(frame, cfg.strata)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(label, part, cfg) for label, part in strata]
    if args.parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=resolve_threads(args.threads)) as pool:
            results = list(pool.map(_estimate_job, jobs))
    else:
        results = [_estimate_job(j) for j in jobs]

    for label, tables in results:
        log.info("stratum %s: %s", label, ", ".join(tables))
        suffix = "" if cfg.strata is None else f"_{label}"
        for name, table in tables.items():
            _write_csv(table, out / f"{name}{suffix}.csv")
        if cfg.strata is not None or len(results) == 1:
            for name in tables:
                if name.startswith("coefficients_"):
                    sys.stdout.write(f"[{label}] {name[len('coefficients_'):]}\n")
                    sys.stdout.write(tables[name].to_string(index=False) + "\n")
    write_manifest(out, "estimate", args.config, cfg.seed, [args.data, args.config], started)
    return 0


# ---------------------------------------------------------------- report

def _read_report(path) -> tuple[str, pd.DataFrame]:
    try:
        table = pd.read_csv(path)
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc.strerror}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: {exc}") from None
    cols = set(table.columns)
    if {"estimator", "coefficient", "estimate", "ase", "p_value"} <= cols:
        return "coefficients", table
    if {"estimator", "coefficient", *MC_COLUMNS} <= cols:
        return "montecarlo", table
    raise IncompatibleReports(f"{path}: not a coefficient or Monte Carlo report")


def _cell(est, ase, p) -> str:
    star = "*" if p < SIGNIFICANCE else ""
    return f"{est:.4f}{star} ({ase:.4f})"


def merge_reports(paths) -> pd.DataFrame:
    """Side-by-side table, one column block per estimator in input order.

    Coefficient tables become ``estimate* (ase)`` cells, starred when
    ``p < 0.05``.  The intercept is exempt from the coefficient-set check
    because the hospital-intercept estimator has none.
    """
    if not paths:
        raise IncompatibleReports("no reports given")
    kinds, blocks = set(), []
    for path in paths:
        kind, table = _read_report(path)
        kinds.add(kind)
        for est, part in table.groupby("estimator", sort=False):
            blocks.append((str(est), Path(path).stem, part.set_index("coefficient")))
    if len(kinds) > 1:
        raise IncompatibleReports("cannot merge coefficient and Monte Carlo reports")
    kind = kinds.pop()

    def core(idx):
        return set(idx) - {"intercept"}

    ref = core(blocks[0][2].index)
    for est, stem, part in blocks[1:]:
        if core(part.index) != ref:
            raise IncompatibleReports(
                f"coefficient sets differ between {blocks[0][0]} and {est} ({stem})"
            )
    order = []
    for _, _, part in blocks:
        order += [c for c in part.index if c not in order]
    if "intercept" in order:
        order = ["intercept"] + [c for c in order if c != "intercept"]

    seen: dict[str, int] = {}
    merged = pd.DataFrame({"coefficient": order})
    for est, stem, part in blocks:
        seen[est] = seen.get(est, 0) + 1
        name = est if seen[est] == 1 else f"{est} ({stem})"
        part = part.reindex(order)
        if kind == "coefficients":
            merged[name] = [
                "" if pd.isna(e) else _cell(e, a, p)
                for e, a, p in zip(part.estimate, part.ase, part.p_value)
            ]
        else:
            for c in MC_COLUMNS:
                merged[f"{name} {c}"] = part[c].to_numpy()
    return merged


def cmd_report(args) -> int:
    merged = merge_reports(args.reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(merged, out)
    sys.stdout.write(merged.to_string(index=False) + "\n")
    return 0


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omniest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"omniest {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="repeat for more detail on standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    s.add_argument("--config", required=True, help="scenario JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--replicates", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="fit estimators to a long-format CSV")
    e.add_argument("--data", required=True, help="long-format CSV, one row per patient-month")
    e.add_argument("--config", required=True, help="analysis JSON")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--parallel", action="store_true", help="fit strata in parallel")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("report", help="merge coefficient or Monte Carlo reports")
    r.add_argument("--out", required=True, help="merged CSV path")
    r.add_argument("reports", nargs="+")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except OmniError as exc:
        log.error("%s: %s", exc.kind, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
