"""Three-wave simulation population with full potential outcomes.

Treatment is absorbing and binary, survival is monotone in treatment, and the
only covariate is a single normal baseline variable ``v``. Regimes are written
as 0/1 strings, e.g. ``y01`` is the outcome at wave 2 under no treatment at
wave 1 and treatment at wave 2, ``s01`` the survival entering wave 3 under
that regime.

Random draws are consumed in whole-column blocks, always in the order
``v, z1, e1, s(wave 2), z2, e2, s(wave 3), z3, e3``, from one PCG64 stream, so
an identical (params, size, seed) triple reproduces the table bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit

from .panel import ObservedPanel

GAMMA_NAMES = ("g0", "g1", "g2", "gY0_2", "g3", "gY0_3", "gY00")
BETA_NAMES = (
    "b0", "bZ", "bV", "bVZ",
    "bZ01", "bZ11", "bY0Z00", "bY0Z01", "bY1Z11", "bVZ01", "bVZ11",
    "bZ001", "bZ011", "bZ111", "bY00Z000", "bY00Z001", "bY01Z011", "bY11Z111",
    "bY0Z0", "bY1Z1", "bVZ001", "bVZ011", "bVZ111",
)
ALPHA_NAMES = (
    "a0", "aY1", "aY0", "aZ", "aV", "aVZ",
    "aZ01", "aZ11", "aY00Z00", "aY01Z01", "aY11Z11", "aVZ01", "aVZ11",
)

# (scenario 1, scenario 2, scenario 3)
_TABLE = {
    "v_mean": (0.0, 17.0, 17.0),
    "v_sd": (2.0, 2.0, 2.0),
    "g0": (0, 2, 2),
    "g1": (-0.02, -0.2, -0.2),
    "b0": (0, 5.3, 5.3),
    "bZ": (-1.5, -1.5, -1.5),
    "bV": (0.015, 0.15, 0.2),
    "bVZ": (-0.005, -0.11, -0.05),
    "a0": (0, 1, 0),
    "aY1": (0.005, 0.00625, 0.0625),
    "aY0": (0.01, 0.0125, 0.125),
    "aZ": (-0.01, -0.2, -0.2),
    "aV": (0.002, 0.02, 0.02),
    "aVZ": (-0.002, -0.02, -0.02),
    "g2": (-0.002, -0.02, -0.02),
    "gY0_2": (-0.02, -0.2, -0.2),
    "bZ01": (-1.5, -1.5, -1.5),
    "bZ11": (-1, -1, -1),
    "bY0Z00": (0.015, 0.02, 0.3),
    "bY0Z01": (0.01, 0.015, 0.2),
    "bY1Z11": (0.005, 0.01, 0.1),
    "bVZ01": (-0.00011, -0.011, -0.011),
    "bVZ11": (-0.00005, -0.005, -0.005),
    "aZ01": (-0.01, -0.2, -0.2),
    "aZ11": (-0.015, -0.1, -0.1),
    "aY00Z00": (0.01, 0.0125, 0.125),
    "aY01Z01": (0.005, 0.00625, 0.0625),
    "aY11Z11": (0.0025, 0.003125, 0.03125),
    "aVZ01": (-0.0001, -0.02, -0.02),
    "aVZ11": (-0.0005, -0.05, -0.05),
    "g3": (-0.0002, -0.002, -0.002),
    "gY0_3": (-0.002, -0.02, -0.02),
    "gY00": (-0.02, -0.2, -0.2),
    "bZ001": (-1.5, -1.5, -1.5),
    "bZ011": (-1, -1, -1),
    "bZ111": (-0.5, -0.5, -0.5),
    "bY00Z000": (0.015, 0.02, 0.3),
    "bY00Z001": (0.01, 0.015, 0.2),
    "bY01Z011": (0.005, 0.01, 0.1),
    "bY11Z111": (0.0025, 0.005, 0.05),
    "bY0Z0": (0.0008, 0.08, 0.08),
    "bY1Z1": (0.0003, 0.03, 0.03),
    "bVZ001": (-0.00011, -0.011, -0.011),
    "bVZ011": (-0.00005, -0.005, -0.005),
    "bVZ111": (-0.00003, -0.003, -0.003),
}

OUTCOME_COLUMNS = ("y1", "y0", "y00", "y01", "y11", "y000", "y001", "y011", "y111")
SURVIVAL_COLUMNS = ("s1", "s0", "s00", "s01", "s11")
POPULATION_COLUMNS = ("v", "z1", "z2", "z3") + OUTCOME_COLUMNS + SURVIVAL_COLUMNS


@dataclass(frozen=True)
class ParameterSet:
    """Coefficients of the treatment (gamma), outcome (beta) and survival
    (alpha) models plus the normal baseline covariate distribution."""

    baseline_mean: float
    baseline_sd: float
    gamma: Mapping[str, float]
    beta: Mapping[str, float]
    alpha: Mapping[str, float]
    noise_sd: float = 1.0

    def __post_init__(self):
        if not self.baseline_sd > 0 or not self.noise_sd > 0:
            raise ValueError("baseline_sd and noise_sd must be positive")
        for family, names in (("gamma", GAMMA_NAMES), ("beta", BETA_NAMES), ("alpha", ALPHA_NAMES)):
            got = dict(getattr(self, family))
            missing = set(names) - set(got)
            extra = set(got) - set(names)
            if missing or extra:
                raise ValueError(
                    f"{family}: missing {sorted(missing)}, unexpected {sorted(extra)}"
                )
            object.__setattr__(self, family, {k: float(got[k]) for k in names})

    def __getitem__(self, name: str) -> float:
        for family in (self.gamma, self.beta, self.alpha):
            if name in family:
                return family[name]
        raise KeyError(f"unknown coefficient {name!r}")

    @classmethod
    def zeros(cls, baseline_mean=0.0, baseline_sd=1.0, **overrides) -> "ParameterSet":
        """All coefficients zero, then ``overrides`` applied by name."""
        fams = {
            "gamma": dict.fromkeys(GAMMA_NAMES, 0.0),
            "beta": dict.fromkeys(BETA_NAMES, 0.0),
            "alpha": dict.fromkeys(ALPHA_NAMES, 0.0),
        }
        for k, val in overrides.items():
            for fam in fams.values():
                if k in fam:
                    fam[k] = float(val)
                    break
            else:
                raise KeyError(f"unknown coefficient {k!r}")
        return cls(baseline_mean, baseline_sd, **fams)

    def to_dict(self) -> dict:
        return {
            "baseline_mean": self.baseline_mean,
            "baseline_sd": self.baseline_sd,
            "noise_sd": self.noise_sd,
            "gamma": dict(self.gamma),
            "beta": dict(self.beta),
            "alpha": dict(self.alpha),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParameterSet":
        return cls(
            float(d["baseline_mean"]), float(d["baseline_sd"]),
            dict(d["gamma"]), dict(d["beta"]), dict(d["alpha"]),
            float(d.get("noise_sd", 1.0)),
        )


def scenario_params(scenario: int) -> ParameterSet:
    """Coefficient set for simulation scenario 1, 2 or 3.

    Scenario 1 has weak confounding, scenario 2 strong confounding with a
    treatment effect that does not vary across principal strata, scenario 3
    adds outcome-by-treatment interactions in survival so that it does.
    """
    if scenario not in (1, 2, 3):
        raise ValueError(f"unknown scenario {scenario!r}; expected 1, 2 or 3")
    col = scenario - 1
    pick = lambda names: {k: float(_TABLE[k][col]) for k in names}
    return ParameterSet(
        baseline_mean=_TABLE["v_mean"][col],
        baseline_sd=_TABLE["v_sd"][col],
        gamma=pick(GAMMA_NAMES),
        beta=pick(BETA_NAMES),
        alpha=pick(ALPHA_NAMES),
    )


@dataclass(frozen=True)
class PopulationTable:
    """Per-subject potential outcomes under every absorbing regime.

    Columns are 1-d float arrays keyed by name (see ``POPULATION_COLUMNS``);
    structurally missing cells are NaN. ``z1..z3`` hold the natural treatment
    path the subject would follow; ``z3`` is NaN when the subject is dead
    before wave 3 on that path.
    """

    columns: Mapping[str, np.ndarray]
    params: ParameterSet | None = None
    seed: int | None = None
    meta: Mapping = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __len__(self) -> int:
        return len(self.columns["v"])

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame({k: self.columns[k] for k in POPULATION_COLUMNS})

    @classmethod
    def from_frame(cls, frame, params=None, seed=None) -> "PopulationTable":
        cols = {k: frame[k].to_numpy(dtype=float) for k in POPULATION_COLUMNS}
        return cls(cols, params, seed)

    def monotonicity_violations(self) -> np.ndarray:
        """Boolean mask of rows breaking absorbing treatment or monotone survival."""
        c = self.columns
        one = lambda a: a == 1
        zero = lambda a: a == 0
        bad = one(c["z1"]) & zero(c["z2"])
        bad |= one(c["z2"]) & zero(c["z3"])
        bad |= one(c["s1"]) & zero(c["s0"])
        bad |= one(c["s11"]) & (zero(c["s01"]) | zero(c["s00"]))
        bad |= one(c["s01"]) & zero(c["s00"])
        bad |= one(c["s00"]) & zero(c["s0"])
        bad |= one(c["s01"]) & zero(c["s0"])
        bad |= one(c["s11"]) & zero(c["s1"])
        return bad


def _bern(u: np.ndarray, eta: np.ndarray) -> np.ndarray:
    return (u < expit(eta)).astype(float)


def generate_population(params: ParameterSet, size: int, seed: int) -> PopulationTable:
    """Draw ``size`` subjects with all potential outcomes and survival states."""
    if size < 1:
        raise ValueError("size must be at least 1")
    g, b, a = params.gamma, params.beta, params.alpha
    rng = np.random.Generator(np.random.PCG64(seed))
    n = size
    sd = params.noise_sd

    v = rng.normal(params.baseline_mean, params.baseline_sd, n)
    z1 = _bern(rng.random(n), g["g0"] + g["g1"] * v)
    e1 = rng.normal(0.0, sd, (n, 2))
    y1 = b["b0"] + b["bZ"] + (b["bV"] + b["bVZ"]) * v + e1[:, 0]
    y0 = b["b0"] + b["bV"] * v + e1[:, 1]

    u = rng.random((n, 2))
    s1 = _bern(u[:, 0], a["a0"] + a["aY1"] * y1 + a["aZ"] + (a["aV"] + a["aVZ"]) * v)
    s0 = _bern(u[:, 1], a["a0"] + a["aY0"] * y0 + a["aV"] * v)
    s0 = np.maximum(s0, s1)

    # z2 on the z1=0 path depends on y0 only, which exists for everybody
    z2 = np.where(z1 == 1, 1.0, _bern(rng.random(n), g["g0"] + g["gY0_2"] * y0 + g["g2"] * v))
    e2 = rng.normal(0.0, sd, (n, 3))
    y00 = b["b0"] + b["bY0Z00"] * y0 + b["bV"] * v + e2[:, 0]
    y01 = (b["b0"] + b["bZ01"] + b["bY0Z01"] * y0 + (b["bV"] + b["bVZ01"]) * v + e2[:, 1])
    y11 = (b["b0"] + b["bZ11"] + b["bY1Z11"] * y1 + (b["bV"] + b["bVZ11"]) * v + e2[:, 2])

    u = rng.random((n, 3))
    base3 = a["a0"] + a["aV"] * v
    s00 = _bern(u[:, 0], base3 + a["aY00Z00"] * y00) * s0
    s01 = _bern(u[:, 1], base3 + a["aZ01"] + a["aY01Z01"] * y01 + a["aVZ01"] * v) * s0
    s11 = _bern(u[:, 2], base3 + a["aZ11"] + a["aY11Z11"] * y11 + a["aVZ11"] * v) * s1
    s01 = np.maximum(s01, s11)
    s00 = np.maximum(s00, s01)

    uz3 = rng.random(n)
    z3 = np.where(
        z2 == 1, 1.0, _bern(uz3, g["g0"] + g["gY00"] * y00 + g["gY0_3"] * y0 + g["g3"] * v)
    )
    e3 = rng.normal(0.0, sd, (n, 4))
    common3 = b["b0"] + b["bV"] * v
    y000 = common3 + b["bY00Z000"] * y00 + b["bY0Z0"] * y0 + e3[:, 0]
    y001 = (common3 + b["bZ001"] + b["bY00Z001"] * y00 + b["bY0Z0"] * y0
            + b["bVZ001"] * v + e3[:, 1])
    y011 = (common3 + b["bZ011"] + b["bY01Z011"] * y01 + b["bY0Z0"] * y0
            + b["bVZ011"] * v + e3[:, 2])
    y111 = (common3 + b["bZ111"] + b["bY11Z111"] * y11 + b["bY1Z1"] * y1
            + b["bVZ111"] * v + e3[:, 3])

    na = np.nan
    y00 = np.where(s0 == 1, y00, na)
    y01 = np.where(s0 == 1, y01, na)
    y11 = np.where(s1 == 1, y11, na)
    y000 = np.where(s00 == 1, y000, na)
    y001 = np.where(s00 == 1, y001, na)
    y011 = np.where(s01 == 1, y011, na)
    y111 = np.where(s11 == 1, y111, na)
    # z3 only exists for subjects alive entering wave 3 on their natural path
    alive3 = np.select([z2 == 0, z1 == 0], [s00, s01], s11)
    alive2 = np.where(z1 == 1, s1, s0)
    z2 = np.where(alive2 == 1, z2, na)
    z3 = np.where((alive3 == 1) & (alive2 == 1), z3, na)

    cols = dict(
        v=v, z1=z1, z2=z2, z3=z3, y1=y1, y0=y0, y00=y00, y01=y01, y11=y11,
        y000=y000, y001=y001, y011=y011, y111=y111,
        s1=s1, s0=s0, s00=s00, s01=s01, s11=s11,
    )
    return PopulationTable(cols, params, seed)


# contrast label -> (treated column, reference column, survival columns of the stratum)
TRUE_EFFECT_DEFS = {
    "1,0": ("y1", "y0", ()),
    "01,00": ("y01", "y00", ("s0",)),
    "11,00": ("y11", "y00", ("s0", "s1")),
    "11,01": ("y11", "y01", ("s0", "s1")),
    "001,000": ("y001", "y000", ("s00",)),
    "011,000": ("y011", "y000", ("s00", "s01")),
    "111,000": ("y111", "y000", ("s00", "s11")),
    "011,001": ("y011", "y001", ("s00", "s01")),
    "111,001": ("y111", "y001", ("s00", "s11")),
    "111,011": ("y111", "y011", ("s01", "s11")),
}


class EmptyStratumError(ValueError):
    pass


@dataclass(frozen=True)
class TrueEffects:
    """Stratum-conditional mean differences, keyed by contrast label."""

    values: Mapping[str, float]
    strata: Mapping[str, tuple[str, ...]]
    counts: Mapping[str, int]

    def __getitem__(self, label: str) -> float:
        return self.values[label]

    def items(self):
        return self.values.items()


def true_effects(pop: PopulationTable) -> TrueEffects:
    values, strata, counts = {}, {}, {}
    for label, (ya, yb, surv) in TRUE_EFFECT_DEFS.items():
        mask = np.ones(len(pop), dtype=bool)
        for col in surv:
            mask &= pop[col] == 1
        if not mask.any():
            cond = " & ".join(f"{c}=1" for c in surv) or "all"
            raise EmptyStratumError(f"stratum {cond} for contrast {label} is empty")
        diff = pop[ya][mask] - pop[yb][mask]
        values[label] = float(np.mean(diff))
        strata[label] = surv
        counts[label] = int(mask.sum())
    return TrueEffects(values, strata, counts)


def potential_column(kind: str, regime: tuple[int, ...]) -> str:
    """Population column name for an outcome (``'y'``) or survival (``'s'``)."""
    return kind + "".join(str(c) for c in regime)


def observed_from_population(pop: PopulationTable, rows: np.ndarray) -> ObservedPanel:
    """Mask counterfactuals: keep only what the natural treatment path reveals."""
    c = {k: v[rows] for k, v in pop.columns.items()}
    n = len(rows)
    z1, z2, z3 = c["z1"], c["z2"], c["z3"]
    treated1 = z1 == 1

    s = np.zeros((n, 3))
    s[:, 0] = 1.0
    s[:, 1] = np.where(treated1, c["s1"], c["s0"])
    path2 = np.select([treated1, z2 == 1], [2, 1], 0)  # 0:00, 1:01, 2:11
    s2_by_path = np.stack([c["s00"], c["s01"], c["s11"]], axis=1)
    s[:, 2] = np.where(s[:, 1] == 1, s2_by_path[np.arange(n), np.where(s[:, 1] == 1, path2, 0)], 0.0)

    y = np.full((n, 3), np.nan)
    y[:, 0] = np.where(treated1, c["y1"], c["y0"])
    y2_by_path = np.stack([c["y00"], c["y01"], c["y11"]], axis=1)
    y[:, 1] = np.where(s[:, 1] == 1, y2_by_path[np.arange(n), path2], np.nan)
    path3 = np.select([treated1, z2 == 1, z3 == 1], [3, 2, 1], 0)  # 000, 001, 011, 111
    y3_by_path = np.stack([c["y000"], c["y001"], c["y011"], c["y111"]], axis=1)
    y[:, 2] = np.where(s[:, 2] == 1, y3_by_path[np.arange(n), path3], np.nan)

    z = np.stack([z1, np.where(s[:, 1] == 1, z2, np.nan), np.where(s[:, 2] == 1, z3, np.nan)], axis=1)
    r = np.where(s == 1, 1.0, np.nan)
    return ObservedPanel(
        v=c["v"][:, None], z=z, y=y, s=s, r=r, ids=np.asarray(rows), v_names=("v",),
        source_index=np.asarray(rows),
    )


def sample_observed(pop: PopulationTable, n: int, seed: int) -> ObservedPanel:
    """Simple random sample without replacement, counterfactuals masked."""
    if n > len(pop):
        raise ValueError(f"sample size {n} exceeds population size {len(pop)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = np.sort(rng.choice(len(pop), size=n, replace=False))
    return observed_from_population(pop, rows)


def manifest(pop: PopulationTable, **extra) -> str:
    doc = {
        "size": len(pop),
        "seed": pop.seed,
        "params": pop.params.to_dict() if pop.params is not None else None,
        "columns": list(POPULATION_COLUMNS),
        "na_token": "NA",
    }
    doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)
