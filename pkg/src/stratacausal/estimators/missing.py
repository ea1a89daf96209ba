"""Imputation of outcomes missing by dropout (not by death)."""

from __future__ import annotations

import numpy as np

from ..panel import ObservedPanel
from .backends import make_backend
from .common import locf

DEFAULT_CONDITIONING = ("baseline", "treatment", "outcome", "w", "x")


def _resolve(panel: ObservedPanel, conditioning):
    """Split conditioning names into baseline columns and history flags."""
    names = list(DEFAULT_CONDITIONING if conditioning is None else conditioning)
    v_cols, flags = [], set()
    for name in names:
        if name == "baseline":
            v_cols.extend(range(panel.v.shape[1]))
        elif name in panel.v_names:
            v_cols.append(panel.v_names.index(name))
        elif name in ("treatment", "outcome"):
            flags.add(name)
        elif name in ("w", "x"):
            if getattr(panel, name) is not None:
                flags.add(name)
            elif conditioning is not None:
                raise ValueError(f"conditioning variable {name!r} absent from the panel")
        else:
            raise ValueError(f"conditioning variable {name!r} absent from the panel")
    return sorted(set(v_cols)), flags


def impute_missing_outcomes(panel: ObservedPanel, backend="glm", rng: np.random.Generator | None = None,
                            conditioning=None) -> ObservedPanel:
    """Fill ``y`` where the subject is alive but ``r == 0``, wave by wave.

    Each wave's model is fit on living responders and conditions on the chosen
    baseline covariates, the treatment history through the current wave, the
    (already completed) earlier outcomes, and the time-varying covariates
    through the current wave. Filled cells get ``r = 1``; cells of dead
    subjects stay NA.
    """
    alive = panel.s == 1
    todo = alive & (panel.r == 0)
    if not todo.any():
        return panel
    rng = np.random.default_rng() if rng is None else rng
    be = make_backend(backend)
    v_cols, flags = _resolve(panel, conditioning)
    y = panel.y.copy()
    r = panel.r.copy()
    w = locf(panel.w)
    x = locf(panel.x)
    z = np.nan_to_num(panel.z, nan=0.0)
    for t in range(panel.n_waves):
        cols = [panel.v[:, v_cols]]
        if "treatment" in flags:
            cols.append(z[:, : t + 1])
        if "outcome" in flags and t > 0:
            cols.append(y[:, :t])
        if "w" in flags:
            cols.append(w[:, : t + 1].reshape(panel.n, -1))
        if "x" in flags:
            cols.append(x[:, : t + 1].reshape(panel.n, -1))
        F = np.column_stack(cols) if cols else np.zeros((panel.n, 0))
        fill = todo[:, t]
        if not fill.any():
            continue
        fit_rows = alive[:, t] & (r[:, t] == 1) & np.all(np.isfinite(F), axis=1)
        if fit_rows.sum() < 2:
            raise ValueError(f"wave {t + 1}: fewer than 2 responders to fit the imputation model")
        bad = fill & ~np.all(np.isfinite(F), axis=1)
        if bad.any():
            raise ValueError(f"wave {t + 1}: conditioning history is missing for subject "
                             f"{panel.ids[np.flatnonzero(bad)[0]]}")
        model = be.fit_outcome(F[fit_rows], y[fit_rows, t], rng)
        y[fill, t] = model.draw(F[fill], rng)
        r[fill, t] = 1
    return panel.with_outcomes(y, r)
