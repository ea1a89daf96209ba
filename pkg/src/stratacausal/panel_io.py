"""CSV ingestion and export for panels and populations.

Two panel layouts are supported:

* **wide**: one row per subject with per-wave columns named by a JSON schema
  (baseline covariates, ``z``, ``y``, ``s``, optional ``r``, ``w`` and ``x``);
* **masked**: the potential-outcome layout of the simulation population
  (``v, z1, y1, y0, s1, s0, z2, y00, ...``) with counterfactual cells left
  empty and structurally missing cells written as the NA token.

All readers report the file line number of the first unparseable cell.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .dgp import POPULATION_COLUMNS, PopulationTable
from .panel import ObservedPanel, PanelValidationError


class PanelFormatError(ValueError):
    pass


SCHEMA_JSON_SCHEMA = {
    "type": "object",
    "required": ["waves", "treatment", "outcome", "survival"],
    "additionalProperties": False,
    "properties": {
        "layout": {"enum": ["wide", "masked"]},
        "id": {"type": "string"},
        "baseline": {"type": "array", "items": {"type": "string"}},
        "waves": {"type": "integer", "minimum": 1},
        "treatment": {"type": "array", "items": {"type": "string"}},
        "outcome": {"type": "array", "items": {"type": "string"}},
        "survival": {"type": "array", "items": {"type": "string"}},
        "response": {"type": "array", "items": {"type": "string"}},
        "w": {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "string"}}},
        "x": {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "string"}}},
        "na_token": {"type": "string"},
        "absorbing": {"type": "boolean"},
    },
}


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping from a wide CSV to an :class:`ObservedPanel`."""

    waves: int
    treatment: tuple[str, ...]
    outcome: tuple[str, ...]
    survival: tuple[str, ...]
    baseline: tuple[str, ...] = ()
    id: str | None = None
    response: tuple[str, ...] | None = None
    w: dict = field(default_factory=dict)
    x: dict = field(default_factory=dict)
    na_token: str = "NA"
    absorbing: bool = True
    layout: str = "wide"

    def __post_init__(self):
        for name in ("treatment", "outcome", "survival", "response"):
            cols = getattr(self, name)
            if cols is not None and len(cols) != self.waves:
                raise PanelFormatError(f"schema lists {len(cols)} {name} columns for {self.waves} waves")
        for kind in ("w", "x"):
            for var, cols in getattr(self, kind).items():
                if len(cols) != self.waves:
                    raise PanelFormatError(f"schema {kind}.{var} has {len(cols)} columns for {self.waves} waves")

    @classmethod
    def from_dict(cls, d: dict) -> "PanelSchema":
        try:
            jsonschema.validate(d, SCHEMA_JSON_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise PanelFormatError(f"schema error at {exc.json_path}: {exc.message}") from exc
        d = dict(d)
        for k in ("treatment", "outcome", "survival", "baseline", "response"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        for k in ("w", "x"):
            if k in d:
                d[k] = {var: tuple(cols) for var, cols in d[k].items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PanelSchema":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise PanelFormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = {
            "layout": self.layout, "waves": self.waves, "treatment": list(self.treatment),
            "outcome": list(self.outcome), "survival": list(self.survival),
            "baseline": list(self.baseline), "na_token": self.na_token, "absorbing": self.absorbing,
        }
        if self.id is not None:
            d["id"] = self.id
        if self.response is not None:
            d["response"] = list(self.response)
        if self.w:
            d["w"] = {k: list(v) for k, v in self.w.items()}
        if self.x:
            d["x"] = {k: list(v) for k, v in self.x.items()}
        return d

    def columns(self) -> list[str]:
        cols = ([self.id] if self.id else []) + list(self.baseline) + list(self.treatment)
        cols += list(self.outcome) + list(self.survival) + list(self.response or ())
        for group in (self.w, self.x):
            for v in group.values():
                cols += list(v)
        return cols


def _read_table(path, na_token: str, blank_is_na: bool = True):
    """Parse a CSV into ``{column: float array}``; report line numbers on bad cells."""
    with open(path, newline="") as fh:
        text = fh.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise PanelFormatError(f"{path}: empty file") from None
    cols: list[list[float]] = [[] for _ in header]
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(header):
            raise PanelFormatError(f"{path}, line {line}: expected {len(header)} fields, got {len(row)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == na_token or (blank_is_na and cell == ""):
                cols[j].append(np.nan)
                continue
            try:
                cols[j].append(float(cell))
            except ValueError:
                raise PanelFormatError(
                    f"{path}, line {line}, column {header[j]!r}: cannot parse {cell!r}"
                ) from None
    return header, {h: np.asarray(c, dtype=float) for h, c in zip(header, cols)}


def read_panel_csv(path, schema: PanelSchema, validate: bool = True) -> ObservedPanel:
    if schema.layout == "masked":
        return read_masked_csv(path, schema.na_token, validate=validate)
    header, data = _read_table(path, schema.na_token)
    missing = [c for c in schema.columns() if c not in data]
    if missing:
        raise PanelFormatError(f"{path}: columns missing from file: {', '.join(missing)}")
    stack = lambda names: np.column_stack([data[c] for c in names])
    n = len(data[header[0]]) if header else 0
    z, y, s = stack(schema.treatment), stack(schema.outcome), stack(schema.survival)
    if np.any(~np.isfinite(s)):
        # survival must be recorded: a blank cell there is a data error
        bad = int(np.flatnonzero(~np.isfinite(s).all(axis=1))[0])
        raise PanelFormatError(f"{path}, line {bad + 2}: survival indicator missing")
    if schema.response is not None:
        r = stack(schema.response)
    else:
        r = np.where(s == 1, np.isfinite(y).astype(float), np.nan)
    v = stack(schema.baseline) if schema.baseline else np.zeros((n, 0))
    ids = data[schema.id] if schema.id else np.arange(n)
    if schema.id and np.all(ids == np.round(ids)):
        ids = ids.astype(np.int64)
    w = np.stack([stack(c) for c in schema.w.values()], axis=2) if schema.w else None
    x = np.stack([stack(c) for c in schema.x.values()], axis=2) if schema.x else None
    panel = ObservedPanel(
        v=v, z=z, y=y, s=s, r=r, ids=ids, w=w, x=x,
        v_names=tuple(schema.baseline), w_names=tuple(schema.w), x_names=tuple(schema.x),
        absorbing=schema.absorbing,
    )
    if validate:
        panel.validate()
    return panel


def _fmt(value: float, na: str) -> str:
    return na if not np.isfinite(value) else repr(float(value))


def default_schema(panel: ObservedPanel, na_token: str = "NA") -> PanelSchema:
    T = panel.n_waves
    per = lambda stem: tuple(f"{stem}{t}" for t in range(1, T + 1))
    return PanelSchema(
        waves=T, treatment=per("z"), outcome=per("y"), survival=per("s"), response=per("r"),
        baseline=tuple(panel.v_names), id="id",
        w={name: per(f"{name}_") for name in panel.w_names} if panel.w is not None else {},
        x={name: per(f"{name}_") for name in panel.x_names} if panel.x is not None else {},
        na_token=na_token, absorbing=panel.absorbing,
    )


def write_panel_csv(panel: ObservedPanel, path, schema: PanelSchema | None = None) -> PanelSchema:
    schema = default_schema(panel) if schema is None else schema
    na = schema.na_token
    blocks = [panel.ids[:, None].astype(float), panel.v, panel.z, panel.y, panel.s, panel.r]
    for arr in (panel.w, panel.x):
        if arr is not None:
            blocks.extend(arr[:, :, k] for k in range(arr.shape[2]))
    M = np.column_stack(blocks)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(schema.columns())
        for i, row in enumerate(M):
            cells = [str(panel.ids[i])] + [_fmt(v, na) for v in row[1:]]
            wr.writerow(cells)
    return schema


# masked potential-outcome layout -----------------------------------------

MASKED_COLUMNS = ("id", "v", "z1", "y1", "y0", "s1", "s0", "z2", "y00", "y01", "y11", "s00", "s01",
                  "s11", "z3", "y000", "y001", "y011", "y111")
_MASKED = object()


def masked_rows(panel: ObservedPanel) -> list[dict]:
    """Cells of the masked layout: a float, ``None`` for structural NA, or a
    masked-counterfactual marker for values the observed path does not reveal."""
    if panel.n_waves != 3 or panel.v.shape[1] != 1:
        raise PanelFormatError("the masked layout needs three waves and one baseline covariate")
    out = []
    for i in range(panel.n):
        z, y, s = panel.z[i], panel.y[i], panel.s[i]
        row = {"id": panel.ids[i], "v": panel.v[i, 0], "z1": z[0]}
        a1 = int(z[0])
        row["y1"] = y[0] if a1 == 1 else _MASKED
        row["y0"] = y[0] if a1 == 0 else _MASKED
        row["s1"] = s[1] if a1 == 1 else _MASKED
        row["s0"] = s[1] if a1 == 0 else _MASKED
        alive2 = s[1] == 1
        row["z2"] = z[1] if alive2 else None
        path2 = (a1, int(z[1])) if alive2 else None
        for r2 in ((0, 0), (0, 1), (1, 1)):
            key = "".join(map(str, r2))
            if r2[0] == a1 and not alive2:
                row["y" + key], row["s" + key] = None, 0.0
            elif r2 == path2:
                row["y" + key], row["s" + key] = y[1], s[2]
            else:
                row["y" + key], row["s" + key] = _MASKED, _MASKED
        alive3 = s[2] == 1
        row["z3"] = z[2] if alive3 else None
        path3 = path2 + (int(z[2]),) if alive3 else None
        for r3 in ((0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 1)):
            key = "y" + "".join(map(str, r3))
            if r3 == path3:
                row[key] = y[2]
            elif (r3[0] == a1 and not alive2) or (path2 is not None and r3[:2] == path2 and not alive3):
                row[key] = None
            else:
                row[key] = _MASKED
        out.append(row)
    return out


def write_masked_csv(panel: ObservedPanel, path, na_token: str = "NA") -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MASKED_COLUMNS)
        for row in masked_rows(panel):
            cells = []
            for c in MASKED_COLUMNS:
                val = row[c]
                if val is _MASKED:
                    cells.append("")
                elif val is None:
                    cells.append(na_token)
                elif c == "id":
                    cells.append(str(val))
                else:
                    cells.append(_fmt(val, na_token))
            wr.writerow(cells)


def read_masked_csv(path, na_token: str = "NA", validate: bool = True) -> ObservedPanel:
    _, d = _read_table(path, na_token)
    missing = [c for c in MASKED_COLUMNS if c not in d]
    if missing:
        raise PanelFormatError(f"{path}: columns missing from file: {', '.join(missing)}")
    n = len(d["v"])
    z1 = d["z1"]
    if np.any(~np.isin(z1, (0, 1))):
        bad = int(np.flatnonzero(~np.isin(z1, (0, 1)))[0])
        raise PanelFormatError(f"{path}, line {bad + 2}: z1 must be 0 or 1")
    t1 = z1 == 1
    s = np.zeros((n, 3))
    s[:, 0] = 1
    s[:, 1] = np.where(t1, d["s1"], d["s0"])
    y = np.full((n, 3), np.nan)
    y[:, 0] = np.where(t1, d["y1"], d["y0"])
    z = np.full((n, 3), np.nan)
    z[:, 0] = z1
    alive2 = s[:, 1] == 1
    z[alive2, 1] = d["z2"][alive2]
    path2 = np.where(t1, 2, np.where(z[:, 1] == 1, 1, 0))
    y2 = np.column_stack([d["y00"], d["y01"], d["y11"]])
    s2 = np.column_stack([d["s00"], d["s01"], d["s11"]])
    rows = np.arange(n)
    y[alive2, 1] = y2[rows, path2][alive2]
    s[alive2, 2] = s2[rows, path2][alive2]
    alive3 = s[:, 2] == 1
    z[alive3, 2] = d["z3"][alive3]
    path3 = np.where(t1, 3, np.where(z[:, 1] == 1, 2, np.where(z[:, 2] == 1, 1, 0)))
    y3 = np.column_stack([d["y000"], d["y001"], d["y011"], d["y111"]])
    y[alive3, 2] = y3[rows, path3][alive3]
    if np.any(~np.isfinite(s)):
        bad = int(np.flatnonzero(~np.isfinite(s).all(axis=1))[0])
        raise PanelFormatError(f"{path}, line {bad + 2}: observed survival cell is empty")
    r = np.where(s == 1, np.isfinite(y).astype(float), np.nan)
    ids = d["id"].astype(np.int64) if np.all(d["id"] == np.round(d["id"])) else d["id"]
    panel = ObservedPanel(v=d["v"][:, None], z=z, y=y, s=s, r=r, ids=ids, v_names=("v",))
    if validate:
        panel.validate()
    return panel


# populations -------------------------------------------------------------

def write_population_csv(pop: PopulationTable, path, na_token: str = "NA") -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(POPULATION_COLUMNS)
        M = np.column_stack([pop[c] for c in POPULATION_COLUMNS])
        for row in M:
            wr.writerow([_fmt(v, na_token) for v in row])


def read_population_csv(path, na_token: str = "NA", params=None, seed=None) -> PopulationTable:
    header, d = _read_table(path, na_token)
    missing = [c for c in POPULATION_COLUMNS if c not in d]
    if missing:
        raise PanelFormatError(f"{path}: columns missing from file: {', '.join(missing)}")
    return PopulationTable({c: d[c] for c in POPULATION_COLUMNS}, params, seed)


__all__ = [
    "PanelFormatError", "PanelSchema", "PanelValidationError", "read_panel_csv", "write_panel_csv",
    "default_schema", "write_masked_csv", "read_masked_csv", "masked_rows",
    "write_population_csv", "read_population_csv",
]
