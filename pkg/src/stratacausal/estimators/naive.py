"""Survivor-only comparisons: the naive difference in means and the
baseline-adjusted regression estimate."""

from __future__ import annotations

import numpy as np

from ..panel import Contrast, ObservedPanel, as_contrasts
from .combine import BootstrapEstimate, percentile_interval
from .common import EmptyCellError, canonical, weighted_mean


def _single(contrasts):
    return isinstance(contrasts, (str, Contrast))


def _arms(panel: ObservedPanel, c: Contrast):
    t = c.wave
    seen = panel.r[:, t - 1] == 1
    a = panel.follows(c.treated) & seen
    b = panel.follows(c.reference) & seen
    for regime, mask in ((c.treated, a), (c.reference, b)):
        if mask.sum() < 2:
            raise EmptyCellError(
                f"contrast {c}: regime {''.join(map(str, regime))} has {int(mask.sum())} "
                "observed survivors, need 2"
            )
    return a, b


def _boot_counts(n: int, n_boot: int, rng: np.random.Generator) -> np.ndarray:
    return rng.multinomial(n, np.full(n, 1.0 / n), size=n_boot)


def naive_estimate(panel: ObservedPanel, contrasts, n_boot: int = 200,
                   rng: np.random.Generator | None = None):
    """Difference of observed-survivor regime means with a percentile
    bootstrap interval. Returns one estimate for a single contrast, else a list."""
    single = _single(contrasts)
    cs = as_contrasts([contrasts] if single else contrasts, panel.n_waves)
    rng = np.random.default_rng() if rng is None else rng
    panel = canonical(panel)
    counts = _boot_counts(panel.n, n_boot, rng) if n_boot > 0 else None
    out = []
    for c in cs:
        a, b = _arms(panel, c)
        y = panel.y[:, c.wave - 1]
        point = weighted_mean(np.ones(a.sum()), y[a]) - weighted_mean(np.ones(b.sum()), y[b])
        boot = np.array([])
        if counts is not None:
            ca, cb = counts[:, a].astype(float), counts[:, b].astype(float)
            keep = (ca.sum(axis=1) > 0) & (cb.sum(axis=1) > 0)
            boot = np.array([weighted_mean(ca[k], y[a]) - weighted_mean(cb[k], y[b])
                             for k in np.flatnonzero(keep)])
        out.append(_finish(point, boot, c, "naive"))
    return out[0] if single else out


def _finish(point, boot, c, method) -> BootstrapEstimate:
    if boot.size < 2:
        return BootstrapEstimate(c.label, float(point), float("nan"), float("nan"),
                                 float("nan"), boot.size, method)
    return percentile_interval(point, boot, c.label, method)


def _arm_coefficient(arm, y, w, V):
    """Weighted linear fit of y on [1, arm, V]; difference of standardized means
    over the survivor covariate distribution equals the arm coefficient."""
    A = np.column_stack([np.ones(len(y)), arm, V])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
    return coef[1]


def baseline_adjusted_estimate(panel: ObservedPanel, contrasts, backend="glm", n_boot: int = 200,
                               rng: np.random.Generator | None = None):
    """Survivor-only regression of the outcome on a regime indicator and the
    baseline covariates; the contrast is the difference of model-standardized
    means over the pooled survivors of both arms."""
    from .backends import make_backend

    single = _single(contrasts)
    cs = as_contrasts([contrasts] if single else contrasts, panel.n_waves)
    rng = np.random.default_rng() if rng is None else rng
    panel = canonical(panel)
    be = make_backend(backend)
    out = []
    counts = _boot_counts(panel.n, n_boot, rng) if n_boot > 0 else None
    for c in cs:
        a, b = _arms(panel, c)
        rows = a | b
        y = panel.y[rows, c.wave - 1]
        arm = a[rows].astype(float)
        V = panel.v[rows]
        if be.name == "glm":
            point = _arm_coefficient(arm, y, np.ones(len(y)), V)
            boot = []
            for cnt in (counts[:, rows] if counts is not None else []):
                keep = cnt > 0
                if arm[keep].min() == arm[keep].max():
                    continue
                boot.append(_arm_coefficient(arm[keep], y[keep], cnt[keep], V[keep]))
            boot = np.asarray(boot)
        else:
            point = _model_difference(be, arm, V, y, rng)
            boot = []
            for cnt in (counts[:, rows] if counts is not None else []):
                idx = np.repeat(np.arange(len(y)), cnt)
                if arm[idx].min() == arm[idx].max():
                    continue
                boot.append(_model_difference(be, arm[idx], V[idx], y[idx], rng))
            boot = np.asarray(boot)
        out.append(_finish(point, boot, c, "adjusted"))
    return out[0] if single else out


def _model_difference(be, arm, V, y, rng):
    X = np.column_stack([arm, V])
    model = be.fit_outcome(X, y, rng)
    X1 = np.column_stack([np.ones(len(y)), V])
    X0 = np.column_stack([np.zeros(len(y)), V])
    return float(np.mean(model.mean(X1) - model.mean(X0)))
