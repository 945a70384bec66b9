"""Command line interface: ``zimix fit`` and ``zimix simulate``.

Reports are written as JSON (the canonical machine format, schema
``zimix/1``) or as a plain-text table rendered purely from the JSON
content.  All numbers are serialized with 17 significant digits so parsing
the report reconstructs every value exactly, and everything is driven by
the ``--seed`` flag: identical invocations produce byte-identical files.

Exit codes: 0 success, 2 data or configuration error, 3 fit failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys

import numpy as np

from . import __version__
from .effects import effect_table
from .exceptions import ConfigError, DataError, FitError, QuadratureError, ZimixError
from .model import Dataset, MediatorFamily, ModelConfig, ObservedRecord, ParameterSet
from .selection import select
from .simulate import SimDesign, builtin_design, builtin_design_names, replicate_study

EXIT_OK = 0
EXIT_DATA = 2
EXIT_FIT = 3


# -- deterministic JSON ------------------------------------------------------


def _format_scalar(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value) or math.isinf(value):
            return "null"  # JSON has no NaN/Inf; absent inference reads as null
        return format(value, ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    raise TypeError(f"cannot serialize {type(value)!r}")


def dumps_report(obj, indent: int = 0) -> str:
    """Serialize a report with 17-significant-digit floats, deterministically."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = ",\n".join(
            f"{inner}{json.dumps(str(key))}: {dumps_report(val, indent + 1)}"
            for key, val in obj.items()
        )
        return "{\n" + items + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in seq):
            return "[" + ", ".join(_format_scalar(v) for v in seq) + "]"
        items = ",\n".join(f"{inner}{dumps_report(v, indent + 1)}" for v in seq)
        return "[\n" + items + "\n" + pad + "]"
    return _format_scalar(obj)


# -- CSV ingestion -----------------------------------------------------------


def read_csv(path: str, y: str, m: str, x: str, z: tuple[str, ...] = ()) -> Dataset:
    """Read a header-row CSV (UTF-8, '.' decimal point) into a Dataset.

    Rows with missing or non-numeric mapped fields are rejected with their
    row number; unmapped columns are ignored.
    """
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in (y, m, x, *z) if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        records = []
        for line_no, row in enumerate(reader, start=2):
            values = {}
            for col in (y, m, x, *z):
                cell = (row.get(col) or "").strip()
                if not cell:
                    raise DataError(f"{path} row {line_no}: missing value in column {col!r}")
                try:
                    values[col] = float(cell)
                except ValueError as exc:
                    raise DataError(
                        f"{path} row {line_no}: non-numeric value {cell!r} in column {col!r}"
                    ) from exc
            try:
                records.append(ObservedRecord(
                    outcome=values[y], mediator=values[m], exposure=values[x],
                    confounders=np.array([values[c] for c in z])))
            except DataError as exc:
                raise DataError(f"{path} row {line_no}: {exc}") from exc
    if not records:
        raise DataError(f"{path}: no data rows")
    return Dataset(tuple(records), tuple(z))


# -- fit reporting -----------------------------------------------------------


def _effect_rows(table) -> dict:
    return {
        name: {
            "estimate": est.estimate, "se": est.se,
            "ci_low": est.ci_low, "ci_high": est.ci_high,
            "p_value": est.p_value,
        }
        for name, est in table.as_dict().items()
    }


def _fit_report(dataset, config, best, table, effects) -> dict:
    space = best.parameter_space
    free = space.pack(best.theta_hat)
    diag = np.diagonal(best.vcov)
    ses = np.sqrt(np.where(np.isfinite(diag) & (diag >= 0), diag, np.nan))
    return {
        "schema": "zimix/1",
        "kind": "fit",
        "zimix_version": __version__,
        "data": {
            "n": dataset.n,
            "n_zero": sum(1 for r in dataset.records if r.mediator == 0),
            "confounders": list(dataset.confounder_names),
        },
        "selection": [
            {
                "family": row.family.value, "k": row.k, "loglik": row.loglik,
                "n_params": row.n_params, "bic": row.bic, "aic": row.aic,
                "converged": row.converged,
                "degenerate_flags": list(row.degenerate_flags),
            }
            for row in table
        ],
        "best": {
            "family": best.family.value, "k": best.k,
            "loglik": best.loglik, "bic": best.bic, "aic": best.aic,
            "n_params": best.n_params, "n_iter": best.n_iter,
            "converged": best.converged,
            "degenerate_flags": list(best.degenerate_flags),
            "parameters": best.theta_hat.as_dict(),
            "free_coordinates": [
                {"name": name, "estimate": float(est), "se": float(se)}
                for name, est, se in zip(space.names, free, ses)
            ],
        },
        "effects": {
            "x1": effects.x1, "x2": effects.x2, "z_ref": effects.z_ref.tolist(),
            "rows": _effect_rows(effects),
        },
    }


def _render_fit_table(report: dict) -> str:
    lines = []
    lines.append(f"zimix fit report (schema {report['schema']})")
    lines.append("")
    lines.append("Model selection (best BIC wins among proper converged fits):")
    lines.append(f"  {'family':8s} {'K':>2s} {'loglik':>12s} {'params':>6s} "
                 f"{'BIC':>12s} {'AIC':>12s} {'converged':>9s}  flags")
    for row in report["selection"]:
        lines.append(
            f"  {row['family']:8s} {row['k']:2d} {row['loglik']:12.4f} "
            f"{row['n_params']:6d} {row['bic']:12.4f} {row['aic']:12.4f} "
            f"{str(row['converged']):>9s}  {','.join(row['degenerate_flags']) or '-'}"
        )
    best = report["best"]
    lines.append("")
    lines.append(f"Selected: {best['family']} with K={best['k']} "
                 f"(loglik {best['loglik']:.4f}, BIC {best['bic']:.4f}, "
                 f"{best['n_iter']} EM iterations)")
    lines.append("")
    lines.append("Free coordinates (unconstrained scale):")
    lines.append(f"  {'name':24s} {'estimate':>12s} {'se':>12s}")
    for row in best["free_coordinates"]:
        se = "n/a" if row["se"] is None else f"{row['se']:12.4f}"
        lines.append(f"  {row['name']:24s} {row['estimate']:12.4f} {se:>12s}")
    eff = report["effects"]
    lines.append("")
    lines.append(f"Effects for exposure {eff['x1']:g} -> {eff['x2']:g} "
                 f"at z_ref {eff['z_ref']}:")
    lines.append(f"  {'effect':6s} {'estimate':>10s} {'se':>10s} "
                 f"{'95% CI':>23s} {'p-value':>10s}")
    for name, row in eff["rows"].items():
        if row["se"] is None:
            lines.append(f"  {name:6s} {row['estimate']:10.4f} {'n/a':>10s} "
                         f"{'n/a':>23s} {'n/a':>10s}")
        else:
            ci = f"({row['ci_low']:9.4f}, {row['ci_high']:9.4f})"
            lines.append(f"  {name:6s} {row['estimate']:10.4f} {row['se']:10.4f} "
                         f"{ci:>23s} {row['p_value']:10.4g}")
    return "\n".join(lines) + "\n"


# -- simulate reporting ------------------------------------------------------


def _simulation_report(report) -> dict:
    design = report.design
    return {
        "schema": "zimix/1",
        "kind": "simulation",
        "zimix_version": __version__,
        "design": {
            "name": design.name, "family": design.family.value, "k": design.k,
            "n": design.n, "n_reps": design.n_reps,
            "x1": design.x1, "x2": design.x2,
            "false_zero_bound": design.false_zero_bound,
            "seed": design.seed, "x_law": design.x_law,
            "true_theta": design.true_theta.as_dict(),
        },
        "effects": {
            name: {
                "true": row.true_value, "mean_estimate": row.mean_estimate,
                "mean_se": row.mean_se, "bias": row.bias,
                "percent_bias": row.percent_bias, "cp": row.cp,
            }
            for name, row in report.effects.items()
        },
        "selection_rate": report.selection_rate,
        "n_failed": report.n_failed,
        "reps": [
            {
                "rep": r.rep_index, "ok": r.ok,
                "selected_family": r.selected_family, "selected_k": r.selected_k,
                "converged": r.converged, "loglik": r.loglik,
                "estimates": r.estimates, "ses": r.ses, "covers": r.covers,
                "error": r.error,
            }
            for r in report.reps
        ],
    }


def _render_simulation_table(report: dict) -> str:
    design = report["design"]
    lines = []
    lines.append(f"zimix simulation report (schema {report['schema']})")
    lines.append("")
    lines.append(f"Design {design['name']}: {design['family']} K={design['k']}, "
                 f"n={design['n']}, {design['n_reps']} replications, "
                 f"exposure {design['x1']:g} -> {design['x2']:g}, seed {design['seed']}")
    lines.append(f"Selected the generating (family, K) in "
                 f"{100 * report['selection_rate']:.1f}% of replications; "
                 f"{report['n_failed']} failed.")
    lines.append("")
    lines.append(f"  {'Effect':6s} {'True':>9s} {'Mean Est':>10s} {'Mean SE':>9s} "
                 f"{'Bias':>9s} {'Pct Bias':>9s} {'CP':>6s}")
    for name, row in report["effects"].items():
        pct = "n/a" if row["percent_bias"] is None else f"{row['percent_bias']:9.2f}"
        lines.append(
            f"  {name:6s} {row['true']:9.4f} {row['mean_estimate']:10.4f} "
            f"{row['mean_se']:9.4f} {row['bias']:9.4f} {pct:>9s} {row['cp']:6.3f}"
        )
    return "\n".join(lines) + "\n"


# -- argument parsing and entry points ---------------------------------------


def _parse_k_range(text: str) -> tuple[int, int]:
    try:
        lo_s, hi_s = text.split(":")
        lo, hi = int(lo_s), int(hi_s)
    except ValueError as exc:
        raise ConfigError(f"malformed k-range {text!r}; expected A:B") from exc
    if lo > hi:
        raise ConfigError(f"malformed k-range {text!r}: lower bound exceeds upper")
    return lo, hi


def _parse_family(text: str) -> MediatorFamily | None:
    if text == "auto":
        return None
    try:
        return MediatorFamily(text)
    except ValueError as exc:
        raise ConfigError(f"unknown family {text!r}") from exc


def _write_output(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text)


def run_fit(args) -> int:
    """Estimation workflow: CSV in, selection + parameters + effects out."""
    try:
        z_cols = tuple(c for c in (args.z.split(",") if args.z else []) if c)
        dataset = read_csv(args.data, args.y, args.m, args.x, z_cols)
        config = ModelConfig(
            family=_parse_family(args.family),
            k_range=_parse_k_range(args.k_range),
            false_zero_bound=args.L,
            exposure_nonzero_interaction=not args.no_xb_interaction,
            exposure_mediator_interaction=not args.no_xm_interaction,
            n_starts=args.n_starts,
            loglik_rel_tol=args.loglik_rel_tol,
            seed=args.seed,
        )
        if args.z_ref == "means":
            z_ref = dataset.confounder_means()
        else:
            z_ref = np.array([float(v) for v in args.z_ref.split(",") if v != ""])
            if z_ref.shape != (len(z_cols),):
                raise DataError(
                    f"--z-ref needs {len(z_cols)} value(s), got {z_ref.shape[0]}"
                )
    except (DataError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    try:
        best, table = select(dataset, config)
        effects = effect_table(best, args.x1, args.x2, z_ref)
    except (DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, QuadratureError) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT

    report = _fit_report(dataset, config, best, table, effects)
    text = dumps_report(report) + "\n" if args.format == "json" else _render_fit_table(report)
    _write_output(args.out, text)
    return EXIT_OK


def _load_design(args) -> SimDesign:
    if args.design in builtin_design_names():
        return builtin_design(args.design, n=args.n, n_reps=args.reps, seed=args.seed)
    try:
        with open(args.design, encoding="utf-8") as handle:
            spec = json.load(handle)
    except OSError as exc:
        raise ConfigError(
            f"unknown design {args.design!r} (not a built-in name and not a "
            f"readable file): {exc}"
        ) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.design}: invalid JSON: {exc}") from exc
    try:
        theta = ParameterSet.from_dict(spec["true_theta"])
        return SimDesign(
            name=spec.get("name", args.design),
            family=MediatorFamily(spec["family"]),
            k=int(spec["k"]),
            true_theta=theta,
            n=args.n, n_reps=args.reps,
            x1=float(spec.get("x1", 0.0)), x2=float(spec.get("x2", 1.0)),
            false_zero_bound=float(spec.get("false_zero_bound", 20.0)),
            seed=args.seed,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.design}: invalid design file: {exc}") from exc


def run_simulate(args) -> int:
    """Replication-study workflow for a built-in or file-defined design."""
    try:
        design = _load_design(args)
        fit_config = ModelConfig(
            k_range=_parse_k_range(args.k_range),
            false_zero_bound=design.false_zero_bound,
            n_starts=args.n_starts,
            loglik_rel_tol=args.loglik_rel_tol,
            seed=args.fit_seed,
        )
    except (DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    try:
        study = replicate_study(design, fit_config, n_workers=args.workers)
    except ZimixError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_FIT

    report = _simulation_report(study)
    text = dumps_report(report) + "\n" if args.format == "json" else _render_simulation_table(report)
    _write_output(args.out, text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zimix",
        description="Causal mediation analysis for zero-inflated mixture mediators",
    )
    parser.add_argument("--version", action="version", version=f"zimix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit mediation models to a CSV dataset")
    p_fit.add_argument("--data", required=True, help="input CSV path")
    p_fit.add_argument("--y", required=True, help="outcome column")
    p_fit.add_argument("--m", required=True, help="observed mediator column")
    p_fit.add_argument("--x", required=True, help="exposure column")
    p_fit.add_argument("--z", default="", help="comma-separated confounder columns")
    p_fit.add_argument("--family", default="auto",
                       choices=["auto", "zilonm", "zipm", "zinbm"])
    p_fit.add_argument("--k-range", default="1:3", help="mixture orders to try, A:B")
    p_fit.add_argument("--L", type=float, default=20.0,
                       help="false-zero bound (threshold above which a value "
                            "is never observed as zero)")
    p_fit.add_argument("--x1", type=float, default=0.0)
    p_fit.add_argument("--x2", type=float, default=1.0)
    p_fit.add_argument("--z-ref", default="means",
                       help="'means' or comma-separated confounder values")
    p_fit.add_argument("--no-xb-interaction", action="store_true",
                       help="drop the exposure-by-nonzero interaction")
    p_fit.add_argument("--no-xm-interaction", action="store_true",
                       help="drop the exposure-by-mediator interaction")
    p_fit.add_argument("--n-starts", type=int, default=5)
    p_fit.add_argument("--loglik-rel-tol", type=float, default=1e-8)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--out", required=True, help="report output path")
    p_fit.add_argument("--format", default="json", choices=["json", "table"])
    p_fit.set_defaults(func=run_fit)

    p_sim = sub.add_parser("simulate", help="run a replication study")
    p_sim.add_argument("--design", required=True,
                       help=f"built-in name ({', '.join(builtin_design_names())}) "
                            f"or a JSON design file")
    p_sim.add_argument("--n", type=int, default=1000, help="records per replication")
    p_sim.add_argument("--reps", type=int, default=100)
    p_sim.add_argument("--seed", type=int, default=0, help="data-generation seed")
    p_sim.add_argument("--fit-seed", type=int, default=0)
    p_sim.add_argument("--k-range", default="1:3")
    p_sim.add_argument("--n-starts", type=int, default=2)
    p_sim.add_argument("--loglik-rel-tol", type=float, default=1e-7)
    p_sim.add_argument("--workers", type=int, default=None,
                       help="parallel workers (default: CPU count)")
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--format", default="json", choices=["json", "table"])
    p_sim.set_defaults(func=run_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
