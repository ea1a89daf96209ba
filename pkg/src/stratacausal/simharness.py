"""Replication engine for the three-scenario simulation study.

A study generates one population per scenario, computes the oracle effects,
then for every sample size and replication draws a simple random sample and
runs each configured estimator. Every replication owns a seed derived from
``(master seed, scenario, n, replication)`` so results do not depend on the
number of worker processes or on scheduling order.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from . import dgp
from .estimators import (
    baseline_adjusted_estimate, msm_estimate, naive_estimate, pencomp_estimate, proposed_estimate,
)
from .panel import default_contrasts

METHODS = ("naive", "adjusted", "msm", "pencomp", "proposed")
RAW_COLUMNS = ["scenario", "n", "method", "contrast", "replicate", "estimate", "ci_low",
               "ci_high", "covered"]
DEFAULT_METHODS = {
    "naive": {"n_boot": 200},
    "msm": {"n_boot": 200},
    "proposed": {"B": 50, "backend": "glm", "simplified": True},
}


def thread_count(default: int | None = None) -> int:
    env = os.environ.get("STRATACAUSAL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ValueError(f"STRATACAUSAL_THREADS must be an integer, got {env!r}") from exc
    return default if default is not None else 1


@dataclass(frozen=True)
class StudyConfig:
    scenario: int
    sample_sizes: tuple[int, ...] = (4000,)
    n_replications: int = 200
    methods: dict = field(default_factory=lambda: dict(DEFAULT_METHODS))
    seed: int = 2024
    population_size: int = 1_000_000
    workers: int | None = None
    contrasts: tuple[str, ...] | None = None
    max_failure_rate: float = 0.01
    fixed_population: bool = True

    def __post_init__(self):
        if self.n_replications < 1:
            raise ValueError("n_replications must be at least 1")
        if self.scenario not in (1, 2, 3):
            raise ValueError(f"unknown scenario {self.scenario}")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        if self.contrasts is not None:
            object.__setattr__(self, "contrasts", tuple(self.contrasts))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sample_sizes"] = list(self.sample_sizes)
        if self.contrasts is not None:
            d["contrasts"] = list(self.contrasts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        if "sample_sizes" in d:
            d["sample_sizes"] = tuple(d["sample_sizes"])
        if d.get("contrasts") is not None:
            d["contrasts"] = tuple(d["contrasts"])
        return cls(**d)


def _seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def population_seed(config: StudyConfig, replicate: int | None = None) -> int:
    if replicate is None or config.fixed_population:
        return _seed(config.seed, config.scenario)
    return _seed(config.seed, config.scenario, 0, replicate)


def _contrast_labels(config: StudyConfig, method: str) -> list[str]:
    labels = list(config.contrasts) if config.contrasts else [c.label for c in default_contrasts(3)]
    if method == "pencomp":
        labels = [lab for lab in labels if len(lab.split(",")[0]) <= 2]
    return labels


def run_method(method: str, panel, contrasts, options: dict, rng: np.random.Generator):
    opts = dict(options)
    if method == "naive":
        return naive_estimate(panel, contrasts, opts.get("n_boot", 200), rng)
    if method == "adjusted":
        return baseline_adjusted_estimate(panel, contrasts, opts.get("backend", "glm"),
                                          opts.get("n_boot", 200), rng)
    if method == "msm":
        return msm_estimate(panel, contrasts, opts.get("n_boot", 200), rng,
                            numerator=opts.get("numerator", "baseline"))
    if method == "pencomp":
        return pencomp_estimate(panel, contrasts, opts.get("B", 50), rng,
                                stratified=opts.get("stratified", True))
    if method == "proposed":
        return proposed_estimate(panel, contrasts, opts.get("B", 50), opts.get("backend", "glm"), rng,
                                 simplified=opts.get("simplified", False),
                                 stratified=opts.get("stratified", False))
    raise ValueError(f"unknown method {method!r}")


# per-process state for worker pools
_STATE: dict = {}


def _population(config: StudyConfig, replicate: int | None = None) -> dgp.PopulationTable:
    seed = population_seed(config, replicate)
    key = (config.scenario, config.population_size, seed)
    if _STATE.get("key") != key:
        _STATE["pop"] = dgp.generate_population(
            dgp.scenario_params(config.scenario), config.population_size, seed)
        _STATE["key"] = key
    return _STATE["pop"]


def _one_replication(config: StudyConfig, n: int, rep: int, truths: dict):
    pop = _population(config, rep)
    rows, failures = [], []
    panel = dgp.sample_observed(pop, n, _seed(config.seed, config.scenario, n, rep))
    for m_index, method in enumerate(METHODS):
        if method not in config.methods:
            continue
        labels = _contrast_labels(config, method)
        rng = np.random.default_rng(_seed(config.seed, config.scenario, n, rep, m_index + 1))
        try:
            ests = run_method(method, panel, labels, config.methods[method] or {}, rng)
        except Exception as exc:  # recorded, the study decides whether to abort
            failures.append({"scenario": config.scenario, "n": n, "method": method,
                             "replicate": rep, "error": f"{type(exc).__name__}: {exc}"})
            continue
        for e in ests:
            truth = truths[e.contrast]
            rows.append({
                "scenario": config.scenario, "n": n, "method": method, "contrast": e.contrast,
                "replicate": rep, "estimate": e.estimate, "ci_low": e.ci_low, "ci_high": e.ci_high,
                "covered": bool(e.ci_low <= truth <= e.ci_high),
            })
    return rows, failures


def _task(args):
    return _one_replication(*args)


@dataclass
class MetricsTable:
    """Bias, RMSE, coverage (percent) and average interval length per cell."""

    frame: pd.DataFrame

    KEYS = ["scenario", "n", "method", "contrast"]

    @classmethod
    def from_raw(cls, raw: pd.DataFrame, truths: dict) -> "MetricsTable":
        out = []
        for key, g in raw.groupby(cls.KEYS, sort=False):
            truth = truths[key[3]]
            err = g["estimate"].to_numpy() - truth
            R = len(g)
            cov = float(g["covered"].mean())
            sd = float(np.std(err, ddof=1)) if R > 1 else float("nan")
            out.append({
                **dict(zip(cls.KEYS, key)), "true_value": truth, "bias": float(err.mean()),
                "rmse": float(np.sqrt(np.mean(err**2))), "coverage": 100.0 * cov,
                "ail": float((g["ci_high"] - g["ci_low"]).mean()),
                "bias_mcse": sd / math.sqrt(R) if R > 1 else float("nan"),
                "coverage_mcse": 100.0 * math.sqrt(cov * (1 - cov) / R),
                "n_reps": R,
            })
        frame = pd.DataFrame(out)
        if len(frame):
            frame = _sorted(frame)
        return cls(frame)

    def cell(self, scenario, n, method, contrast) -> pd.Series:
        f = self.frame
        hit = f[(f.scenario == scenario) & (f.n == n) & (f.method == method) & (f.contrast == contrast)]
        if hit.empty:
            raise KeyError((scenario, n, method, contrast))
        return hit.iloc[0]

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.10g")

    def to_json(self, path=None) -> str:
        text = json.dumps(json.loads(self.frame.to_json(orient="records", double_precision=10)),
                          indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _sorted(frame: pd.DataFrame) -> pd.DataFrame:
    order = {lab.label: i for i, lab in enumerate(default_contrasts(3))}
    morder = {m: i for i, m in enumerate(METHODS)}
    f = frame.assign(_m=frame["method"].map(morder), _c=frame["contrast"].map(order))
    return f.sort_values(["scenario", "n", "_m", "_c"]).drop(columns=["_m", "_c"]).reset_index(drop=True)


@dataclass
class StudyResult:
    config: StudyConfig
    truths: dict
    raw: pd.DataFrame
    metrics: MetricsTable
    failures: pd.DataFrame
    elapsed: float

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "raw": out / "raw_estimates.csv",
            "metrics_csv": out / "metrics.csv",
            "metrics_json": out / "metrics.json",
            "failures": out / "failures.csv",
            "truths": out / "true_effects.json",
        }
        self.raw.to_csv(paths["raw"], index=False, float_format="%.10g")
        self.metrics.to_csv(paths["metrics_csv"])
        self.metrics.to_json(paths["metrics_json"])
        self.failures.to_csv(paths["failures"], index=False)
        paths["truths"].write_text(json.dumps(self.truths, indent=2, sort_keys=True) + "\n")
        return paths


class StudyAborted(RuntimeError):
    pass


def run_study(config: StudyConfig, progress=None) -> StudyResult:
    start = time.perf_counter()
    truths = dgp.true_effects(_population(config)).values
    truths = {k: float(v) for k, v in truths.items()}
    tasks = [(config, n, rep, truths) for n in config.sample_sizes for rep in range(config.n_replications)]
    workers = config.workers if config.workers is not None else thread_count()
    results = []
    if workers <= 1 or len(tasks) == 1:
        for i, t in enumerate(tasks):
            results.append(_task(t))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, res in enumerate(pool.map(_task, tasks, chunksize=1)):
                results.append(res)
                if progress:
                    progress(i + 1, len(tasks))
    rows = [r for res, _ in results for r in res]
    fails = [f for _, fl in results for f in fl]
    raw = pd.DataFrame(rows, columns=RAW_COLUMNS)
    if len(raw):
        raw = _sorted_raw(raw)
    failures = pd.DataFrame(fails, columns=["scenario", "n", "method", "replicate", "error"])
    n_runs = len(tasks) * len(config.methods)
    if n_runs and len(failures) / n_runs > config.max_failure_rate:
        raise StudyAborted(
            f"{len(failures)} of {n_runs} estimator runs failed; first: {failures.iloc[0].to_dict()}"
        )
    metrics = MetricsTable.from_raw(raw, truths)
    return StudyResult(config, truths, raw, metrics, failures, time.perf_counter() - start)


def _sorted_raw(raw: pd.DataFrame) -> pd.DataFrame:
    order = {lab.label: i for i, lab in enumerate(default_contrasts(3))}
    morder = {m: i for i, m in enumerate(METHODS)}
    f = raw.assign(_m=raw["method"].map(morder), _c=raw["contrast"].map(order))
    f = f.sort_values(["scenario", "n", "_m", "_c", "replicate"])
    return f.drop(columns=["_m", "_c"]).reset_index(drop=True)


# comparison against the shipped reference tables -------------------------

REFERENCE_REPS = 1000


def load_reference(path=None) -> pd.DataFrame:
    if path is None:
        src = resources.files("stratacausal.data").joinpath("reference_sim_results.csv")
        with src.open("r") as fh:
            return pd.read_csv(fh, comment="#", dtype={"contrast": str})
    return pd.read_csv(path, comment="#", dtype={"contrast": str})


@dataclass(frozen=True)
class Tolerance:
    """Agreement bands for a reduced-replication run.

    Bias passes when ``|bias - ref| <= z * sqrt(mcse^2 + ref_mcse^2) + bias_abs``;
    coverage passes when ``|cov - ref| <= z * sqrt(p (1 - p) (1/R + 1/R_ref)) + coverage_abs``
    (in percentage points, ``p`` the reference rate kept at least ``1/R`` away
    from 0 and 1).
    """

    z: float = 3.0
    bias_abs: float = 0.005
    coverage_abs: float = 0.0


@dataclass
class ComparisonReport:
    cells: pd.DataFrame
    missing_reference: list
    missing_metrics: list

    @property
    def all_pass(self) -> bool:
        return bool(len(self.cells)) and bool(self.cells["passed"].all())

    def to_json(self) -> str:
        return json.dumps({
            "cells": json.loads(self.cells.to_json(orient="records", double_precision=10)),
            "missing_reference": self.missing_reference,
            "missing_metrics": self.missing_metrics,
            "all_pass": self.all_pass,
        }, indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'scen':>4} {'n':>5} {'method':<9} {'contrast':<8} "
                 f"{'bias':>8} {'ref':>8} {'tol':>6} {'cov':>6} {'ref':>6} {'tol':>5}  result"]
        for r in self.cells.itertuples():
            lines.append(
                f"{r.scenario:>4} {r.n:>5} {r.method:<9} {r.contrast:<8} {r.bias:8.4f} "
                f"{r.ref_bias:8.4f} {r.bias_tol:6.3f} {r.coverage:6.1f} {r.ref_coverage:6.1f} "
                f"{r.coverage_tol:5.1f}  {'pass' if r.passed else 'FAIL'}"
            )
        for key in self.missing_reference:
            lines.append(f"no reference cell for {key}")
        for key in self.missing_metrics:
            lines.append(f"no metrics for reference cell {key}")
        return "\n".join(lines)


def compare_to_reference(metrics: MetricsTable, reference=None,
                         tolerance: Tolerance = Tolerance()) -> ComparisonReport:
    ref = reference if isinstance(reference, pd.DataFrame) else load_reference(reference)
    keys = MetricsTable.KEYS
    m = metrics.frame.copy()
    merged = m.merge(ref, on=keys, how="left", suffixes=("", "_ref"), indicator=True)
    missing_ref = [tuple(x) for x in merged.loc[merged["_merge"] == "left_only", keys].itertuples(index=False)]
    merged = merged[merged["_merge"] == "both"].drop(columns="_merge")
    scope = ref.merge(m[["scenario", "n", "method"]].drop_duplicates(), on=["scenario", "n", "method"])
    have = set(map(tuple, m[keys].itertuples(index=False)))
    missing_metrics = [tuple(x) for x in scope[keys].itertuples(index=False) if tuple(x) not in have]
    rows = []
    for r in merged.itertuples(index=False):
        R = r.n_reps
        ref_mcse = r.rmse_ref / math.sqrt(REFERENCE_REPS)
        mcse = r.bias_mcse if np.isfinite(r.bias_mcse) else r.rmse / math.sqrt(max(R, 1))
        bias_tol = tolerance.z * math.sqrt(mcse**2 + ref_mcse**2) + tolerance.bias_abs
        p = min(max(r.coverage_ref / 100.0, 1.0 / R), 1.0 - 1.0 / R) if R > 1 else 0.5
        cov_tol = 100.0 * tolerance.z * math.sqrt(p * (1 - p) * (1.0 / R + 1.0 / REFERENCE_REPS))
        cov_tol += tolerance.coverage_abs
        bias_ok = abs(r.bias - r.bias_ref) <= bias_tol
        cov_ok = abs(r.coverage - r.coverage_ref) <= cov_tol
        rows.append({
            "scenario": r.scenario, "n": r.n, "method": r.method, "contrast": r.contrast,
            "bias": r.bias, "ref_bias": r.bias_ref, "bias_tol": bias_tol, "bias_pass": bias_ok,
            "coverage": r.coverage, "ref_coverage": r.coverage_ref, "coverage_tol": cov_tol,
            "coverage_pass": cov_ok, "rmse": r.rmse, "ref_rmse": r.rmse_ref, "ail": r.ail,
            "ref_ail": r.ail_ref, "passed": bool(bias_ok and cov_ok),
        })
    cells = pd.DataFrame(rows)
    return ComparisonReport(cells, missing_ref, missing_metrics)
