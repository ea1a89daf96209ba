"""Command-line interface.

Commands: ``genpop`` (population CSV plus manifest, optionally an observed
sample), ``simulate`` (replication study), ``estimate`` (effects on a panel
CSV) and ``compare`` (metrics against the reference tables).

Exit codes: 0 success, 1 estimator or runtime failure, 2 configuration or
schema error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd

from . import dgp, panel_io, simharness
from .panel import PanelValidationError, as_contrasts

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

_METHOD_OPTIONS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_boot": {"type": "integer", "minimum": 2},
        "B": {"type": "integer", "minimum": 2},
        "backend": {"enum": ["glm", "bart", "pspline"]},
        "simplified": {"type": "boolean"},
        "stratified": {"type": "boolean"},
        "numerator": {"enum": ["marginal", "baseline"]},
    },
}

STUDY_SCHEMA = {
    "type": "object",
    "required": ["scenario", "n_replications", "methods"],
    "additionalProperties": False,
    "properties": {
        "scenario": {"enum": [1, 2, 3]},
        "sample_sizes": {"type": "array", "items": {"type": "integer", "minimum": 10}, "minItems": 1},
        "n_replications": {"type": "integer", "minimum": 1},
        "methods": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": False,
            "properties": {m: _METHOD_OPTIONS for m in simharness.METHODS},
        },
        "seed": {"type": "integer", "minimum": 0},
        "population_size": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "contrasts": {"type": "array", "items": {"type": "string", "pattern": "^[01]+,[01]+$"}},
        "max_failure_rate": {"type": "number", "minimum": 0, "maximum": 1},
        "fixed_population": {"type": "boolean"},
    },
}

QUICK_PROFILE = {"population_size": 200_000, "n_replications": 5, "B": 10, "n_boot": 50}


class ConfigError(ValueError):
    pass


def _json_path(error: jsonschema.ValidationError) -> str:
    path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)
    if error.validator == "required":
        missing = error.message.split("'")[1] if "'" in error.message else ""
        return f"{path}.{missing}" if missing else path
    return path


def validate_study_config(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(STUDY_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"config error at {_json_path(e)}: {e.message}")


def load_study_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config error at $: top level must be an object")
    return doc


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# genpop -------------------------------------------------------------------

def cmd_genpop(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = dgp.scenario_params(args.scenario)
    pop = dgp.generate_population(params, args.size, args.seed)
    panel_io.write_population_csv(pop, out / "population.csv", args.na_token)
    (out / "manifest.json").write_text(dgp.manifest(pop, scenario=args.scenario) + "\n")
    if args.sample:
        panel = dgp.sample_observed(pop, args.sample, args.seed)
        schema = panel_io.write_panel_csv(panel, out / "panel.csv")
        (out / "panel_schema.json").write_text(json.dumps(schema.to_dict(), indent=2) + "\n")
        panel_io.write_masked_csv(panel, out / "panel_masked.csv", args.na_token)
    if args.truths:
        te = dgp.true_effects(pop)
        (out / "true_effects.json").write_text(json.dumps(te.values, indent=2) + "\n")
        for label, value in te.items():
            print(f"{label:>8}  {value: .4f}")
    _log(f"wrote {args.size} subjects to {out / 'population.csv'}")
    return EXIT_OK


# simulate -----------------------------------------------------------------

def resolve_study(args) -> dict:
    doc = load_study_config(args.config) if args.config else {}
    doc = copy.deepcopy(doc)
    if args.scenario is not None:
        doc["scenario"] = args.scenario
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.size is not None:
        doc["population_size"] = args.size
    if args.method:
        old = doc.get("methods", {})
        doc["methods"] = {m: old.get(m, {}) for m in args.method}
    elif "methods" not in doc and not args.config:
        doc["methods"] = copy.deepcopy(simharness.DEFAULT_METHODS)
    if args.quick:
        doc.setdefault("population_size", QUICK_PROFILE["population_size"])
        doc["population_size"] = min(doc["population_size"], QUICK_PROFILE["population_size"])
        doc.setdefault("n_replications", QUICK_PROFILE["n_replications"])
        for opts in doc.get("methods", {}).values():
            opts["B"] = min(opts.get("B", 50), QUICK_PROFILE["B"])
            opts["n_boot"] = min(opts.get("n_boot", 200), QUICK_PROFILE["n_boot"])
        # drop options a method does not take
        for m, opts in doc.get("methods", {}).items():
            if m in ("naive", "adjusted", "msm"):
                opts.pop("B", None)
            else:
                opts.pop("n_boot", None)
    if args.replications is not None:
        doc["n_replications"] = args.replications
    if args.backend:
        for m in ("proposed", "adjusted"):
            if m in doc.get("methods", {}):
                doc["methods"][m]["backend"] = args.backend
    validate_study_config(doc)
    return doc


def cmd_simulate(args) -> int:
    doc = resolve_study(args)
    config = simharness.StudyConfig.from_dict(doc)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    total = len(config.sample_sizes) * config.n_replications

    def progress(done, _total):
        if done == _total or done % max(1, _total // 10) == 0:
            _log(f"replication {done}/{_total}")

    try:
        result = simharness.run_study(config, progress=progress)
    except simharness.StudyAborted as exc:
        _log(f"study aborted: {exc}")
        return EXIT_RUNTIME
    result.write(out)
    report = simharness.compare_to_reference(result.metrics)
    (out / "comparison.json").write_text(report.to_json() + "\n")
    (out / "comparison.txt").write_text(report.table() + "\n")
    print(_metrics_table(result.metrics))
    _log(f"{total} replications in {result.elapsed:.1f}s; {len(result.failures)} estimator failures")
    return EXIT_OK


def _metrics_table(metrics: simharness.MetricsTable) -> str:
    f = metrics.frame
    lines = [f"{'method':<9} {'n':>5} {'contrast':<8} {'true':>7} {'bias':>8} {'rmse':>7} {'cov%':>6} {'ail':>7}"]
    for r in f.itertuples():
        lines.append(f"{r.method:<9} {r.n:>5} {r.contrast:<8} {r.true_value:7.3f} {r.bias:8.4f} "
                     f"{r.rmse:7.4f} {r.coverage:6.1f} {r.ail:7.4f}")
    return "\n".join(lines)


# estimate -----------------------------------------------------------------

def duration_label(regime, years_per_wave: int = 2) -> str:
    k = sum(regime)
    return "no shock" if k == 0 else f"{years_per_wave * k} years"


def contrast_label(contrast, years_per_wave: int = 2) -> str:
    return (f"{duration_label(contrast.treated, years_per_wave)} vs. "
            f"{duration_label(contrast.reference, years_per_wave)}")


def run_estimate(panel, method: str, contrasts, backend: str, seed: int, B: int, n_boot: int):
    """The in-process call made by ``estimate``; shared so results can be compared exactly."""
    opts = {"B": B, "n_boot": n_boot, "backend": backend}
    if method == "msm":
        opts.pop("backend")
    rng = np.random.default_rng(seed)
    return simharness.run_method(method, panel, contrasts, opts, rng)


def cmd_estimate(args) -> int:
    try:
        schema = panel_io.PanelSchema.load(args.schema)
    except (panel_io.PanelFormatError, FileNotFoundError) as exc:
        _log(str(exc))
        return EXIT_CONFIG
    try:
        panel = panel_io.read_panel_csv(args.panel, schema)
    except (panel_io.PanelFormatError, PanelValidationError) as exc:
        _log(str(exc))
        return EXIT_CONFIG
    T = panel.n_waves if args.method != "pencomp" else min(panel.n_waves, 2)
    try:
        contrasts = as_contrasts(args.contrast, T) if args.contrast else as_contrasts(None, T)
    except ValueError as exc:
        _log(str(exc))
        return EXIT_CONFIG
    labels = [c.label for c in contrasts]
    try:
        ests = run_estimate(panel, args.method, labels, args.backend, args.seed, args.B, args.n_boot)
    except Exception as exc:
        _log(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    rows = []
    for c, e in zip(contrasts, ests):
        d = e.to_dict()
        d["label"] = contrast_label(c, args.years_per_wave)
        d["method"] = args.method
        rows.append(d)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "estimates.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(f"{'comparison':<24} {'contrast':<8} {'estimate':>9}   95% interval")
    for r in rows:
        print(f"{r['label']:<24} {r['contrast']:<8} {r['estimate']:9.3f}   "
              f"({r['ci_low']:.3f}, {r['ci_high']:.3f})")
    return EXIT_OK


# compare ------------------------------------------------------------------

def cmd_compare(args) -> int:
    try:
        frame = pd.read_csv(args.metrics, dtype={"contrast": str})
    except FileNotFoundError as exc:
        _log(str(exc))
        return EXIT_CONFIG
    needed = set(simharness.MetricsTable.KEYS) | {"bias", "coverage", "bias_mcse", "n_reps", "rmse", "ail"}
    if needed - set(frame.columns):
        _log(f"metrics file lacks columns: {', '.join(sorted(needed - set(frame.columns)))}")
        return EXIT_CONFIG
    tol = simharness.Tolerance(z=args.z, bias_abs=args.bias_abs, coverage_abs=args.coverage_abs)
    report = simharness.compare_to_reference(simharness.MetricsTable(frame), args.reference, tol)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(report.to_json() + "\n")
        (out / "comparison.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


# parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stratacausal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("genpop", help="generate a scenario population")
    g.add_argument("--scenario", type=int, choices=(1, 2, 3), required=True)
    g.add_argument("--size", type=int, default=1_000_000)
    g.add_argument("--seed", type=int, default=2024)
    g.add_argument("--out-dir", default=".")
    g.add_argument("--sample", type=int, default=0, metavar="N",
                   help="also write an observed sample of N subjects (wide and masked layouts)")
    g.add_argument("--truths", action="store_true", help="write and print the true effects")
    g.add_argument("--na-token", default="NA")
    g.set_defaults(func=cmd_genpop)

    s = sub.add_parser("simulate", help="run a replication study")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--scenario", type=int, choices=(1, 2, 3))
    s.add_argument("--size", type=int, help="population size")
    s.add_argument("--replications", type=int)
    s.add_argument("--method", action="append", choices=simharness.METHODS)
    s.add_argument("--backend", choices=("glm", "bart", "pspline"))
    s.add_argument("--out-dir", default="results")
    s.add_argument("--quick", action="store_true", help="small population and few bootstraps")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate effects on a panel CSV")
    e.add_argument("--panel", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--method", choices=simharness.METHODS, default="proposed")
    e.add_argument("--backend", choices=("glm", "bart", "pspline"), default="glm")
    e.add_argument("--contrast", action="append", help="e.g. 111,000; repeatable")
    e.add_argument("--seed", type=int, default=2024)
    e.add_argument("--B", type=int, default=50)
    e.add_argument("--n-boot", type=int, default=200)
    e.add_argument("--years-per-wave", type=int, default=2)
    e.add_argument("--out-dir", default=".")
    e.set_defaults(func=cmd_estimate)

    c = sub.add_parser("compare", help="compare a metrics CSV with the reference tables")
    c.add_argument("--metrics", required=True)
    c.add_argument("--reference")
    c.add_argument("--z", type=float, default=3.0)
    c.add_argument("--bias-abs", type=float, default=0.005)
    c.add_argument("--coverage-abs", type=float, default=0.0)
    c.add_argument("--out-dir")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(str(exc))
        return EXIT_CONFIG
    except (ValueError, RuntimeError) as exc:
        _log(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
