"""Inverse-probability-weighted marginal structural model estimates.

Weights are products over waves of ratios ``numerator / denominator``, where
the denominator is the fitted probability of the event actually observed
(treatment received, response, survival) given the subject's history and the
numerator is a stabilizing probability. Regime means are weighted (Hajek)
means of observed outcomes among subjects who follow the regime, i.e. a
saturated marginal model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..panel import Contrast, ObservedPanel, as_contrasts
from ..regress import FitError, WeightedDesign, clip_prob, fit_logistic, with_intercept
from .combine import BootstrapEstimate, percentile_interval
from .common import EmptyCellError, canonical, weighted_mean


class WeightError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightSet:
    """Per subject-wave weights; cells for subjects dead at that wave are NaN.

    ``components`` maps ``"<kind>_num"`` / ``"<kind>_den"`` (kind in treat,
    resp, death) to per-wave probabilities of the observed event, NaN where the
    event is not at risk.
    """

    w_treat: np.ndarray
    w_resp: np.ndarray
    w_death: np.ndarray
    w_final: np.ndarray
    components: dict = field(default_factory=dict, compare=False)
    ids: np.ndarray | None = None

    @classmethod
    def ones(cls, panel: ObservedPanel) -> "WeightSet":
        alive = np.where(panel.s == 1, 1.0, np.nan)
        return cls(alive, alive.copy(), alive.copy(), alive.copy(), {}, panel.ids)


def _filled(arr: np.ndarray, alive: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """History values usable as predictors: carry forward, then fill the
    remaining gaps with the weighted column mean among the living."""
    out = np.array(arr, dtype=float, copy=True)
    for t in range(out.shape[1]):
        gap = ~np.isfinite(out[:, t])
        if t > 0:
            out[gap, t] = out[gap, t - 1]
        gap = ~np.isfinite(out[:, t])
        if gap.any():
            ok = ~gap & alive[:, t]
            fill = np.average(out[ok, t], weights=weights[ok]) if np.any(weights[ok] > 0) else 0.0
            out[gap, t] = fill
    return out


def _history(panel, j, y_f, w_f, x_f, include_z=True, include_r=False):
    """Predictors for an event at wave ``j`` (1-based): everything up to ``j-1``."""
    cols = [panel.v]
    if include_z and j > 1:
        cols.append(np.nan_to_num(panel.z[:, : j - 1], nan=0.0))
    if include_r and j > 1:
        cols.append(np.nan_to_num(panel.r[:, : j - 1], nan=0.0))
    if j > 1:
        cols.append(y_f[:, : j - 1])
        if w_f is not None:
            cols.append(w_f[:, : j - 1].reshape(panel.n, -1))
        if x_f is not None:
            cols.append(x_f[:, : j - 1].reshape(panel.n, -1))
    return np.column_stack(cols)


def _cell_prob(keys: np.ndarray, event: np.ndarray, risk: np.ndarray, weights: np.ndarray):
    """Weighted event frequency within cells of identical ``keys`` rows."""
    p = np.full(len(event), np.nan)
    k = keys[risk]
    if k.shape[1] == 0:
        inv = np.zeros(len(k), dtype=np.intp)
    elif np.all((k == 0) | (k == 1)):
        inv = (k @ (2.0 ** np.arange(k.shape[1]))).astype(np.intp)
    else:
        _, inv = np.unique(k, axis=0, return_inverse=True)
        inv = inv.ravel()
    num = np.bincount(inv, weights=weights[risk] * event[risk])
    den = np.bincount(inv, weights=weights[risk])
    with np.errstate(invalid="ignore", divide="ignore"):
        p[risk] = num[inv] / den[inv]
    return clip_prob(p)


def _fit_prob(X, event, risk, weights, backend, rng):
    """Fitted P(event = 1 | X) on the risk set; NaN elsewhere."""
    p = np.full(len(event), np.nan)
    rows = risk & (weights > 0)
    e = event[rows]
    if rows.sum() == 0:
        return p
    if e.min() == e.max():
        p[risk] = clip_prob(e[0])
        return p
    if backend is None or getattr(backend, "name", "glm") == "glm":
        fit = fit_logistic(WeightedDesign(with_intercept(X[rows]), e, weights[rows]))
        if fit.convergence == "separated":
            raise WeightError("degenerate weight model: the event is perfectly separated")
        p[risk] = clip_prob(fit.predict(with_intercept(X[risk])))
    else:
        idx = np.repeat(np.flatnonzero(rows), weights[rows].astype(int))
        model = backend.fit_binary(X[idx], event[idx], rng)
        p[risk] = model.prob(X[risk])
    return p


def _observed(p, event):
    return np.where(event == 1, p, 1.0 - p)


def msm_weights(panel: ObservedPanel, numerator: str = "baseline", backend=None,
                counts: np.ndarray | None = None, rng: np.random.Generator | None = None,
                response: bool | None = None) -> WeightSet:
    """Stabilized treatment, response and death weights.

    ``numerator="baseline"`` stabilizes with probabilities given the past
    treatment (and response) history and the baseline covariates, except for
    first-wave treatment, whose numerator is its marginal frequency.
    ``"marginal"`` drops the baseline covariates everywhere, which in a
    saturated model amounts to unstabilized weights. ``counts`` are frequency weights, used to refit
    inside a bootstrap without copying rows. The response component is used
    when any living subject has a missing outcome, unless ``response`` says
    otherwise.
    """
    if numerator not in ("marginal", "baseline"):
        raise ValueError("numerator must be 'marginal' or 'baseline'")
    n, T = panel.n, panel.n_waves
    cw = np.ones(n) if counts is None else np.asarray(counts, dtype=float)
    alive = panel.s == 1
    y_f = _filled(np.where(panel.r == 1, panel.y, np.nan), alive, cw)
    w_f = None if panel.w is None else np.stack(
        [_filled(panel.w[:, :, k], alive, cw) for k in range(panel.w.shape[2])], axis=2)
    x_f = None if panel.x is None else np.stack(
        [_filled(panel.x[:, :, k], alive, cw) for k in range(panel.x.shape[2])], axis=2)
    if response is None:
        response = bool(np.any(alive & (panel.r == 0)))
    z = np.nan_to_num(panel.z, nan=0.0)
    r = np.nan_to_num(panel.r, nan=0.0)
    comp = {k: np.full((n, T), np.nan) for k in
            ("treat_num", "treat_den", "resp_num", "resp_den", "death_num", "death_den")}
    ratio = {k: np.ones((n, T)) for k in ("treat", "resp", "death")}
    for j in range(1, T + 1):
        at = alive[:, j - 1]
        # treatment at j
        risk = at.copy()
        if panel.absorbing and j > 1:
            risk &= z[:, j - 2] == 0
        X = _history(panel, j, y_f, w_f, x_f, include_z=not panel.absorbing)
        den = _fit_prob(X, z[:, j - 1], risk, cw, backend, rng)
        zkeys = z[:, : j - 1] if not panel.absorbing else np.zeros((n, 0))
        if numerator == "marginal" or j == 1:
            # conditioning the first treatment on V would cancel its denominator
            num = _cell_prob(zkeys, z[:, j - 1], risk, cw)
        else:
            num = _fit_prob(np.column_stack([zkeys, panel.v]), z[:, j - 1], risk, cw, None, rng)
        comp["treat_den"][:, j - 1] = _observed(den, z[:, j - 1])
        comp["treat_num"][:, j - 1] = _observed(num, z[:, j - 1])
        ratio["treat"][risk, j - 1] = comp["treat_num"][risk, j - 1] / comp["treat_den"][risk, j - 1]
        # survival into j, among those alive at j-1
        if j > 1:
            risk = alive[:, j - 2]
            ev = alive[:, j - 1].astype(float)
            X = _history(panel, j, y_f, w_f, x_f, include_z=True)
            den = _fit_prob(X, ev, risk, cw, backend, rng)
            if numerator == "marginal":
                num = _cell_prob(z[:, : j - 1], ev, risk, cw)
            else:
                num = _fit_prob(np.column_stack([z[:, : j - 1], panel.v]), ev, risk, cw, None, rng)
            comp["death_den"][:, j - 1] = _observed(den, ev)
            comp["death_num"][:, j - 1] = _observed(num, ev)
            ok = risk & (ev == 1)
            ratio["death"][ok, j - 1] = comp["death_num"][ok, j - 1] / comp["death_den"][ok, j - 1]
        # response at j, among the living
        if response:
            risk = at
            ev = r[:, j - 1]
            X = _history(panel, j, y_f, w_f, x_f, include_z=True, include_r=True)
            X = np.column_stack([X, z[:, j - 1]])
            den = _fit_prob(X, ev, risk, cw, backend, rng)
            keys = np.column_stack([r[:, : j - 1], z[:, :j]])
            if numerator == "marginal":
                num = _cell_prob(keys, ev, risk, cw)
            else:
                num = _fit_prob(np.column_stack([r[:, : j - 1], panel.v]), ev, risk, cw, None, rng)
            comp["resp_den"][:, j - 1] = _observed(den, ev)
            comp["resp_num"][:, j - 1] = _observed(num, ev)
            ratio["resp"][risk, j - 1] = comp["resp_num"][risk, j - 1] / comp["resp_den"][risk, j - 1]
    dead = ~alive
    out = {}
    for k, v in ratio.items():
        cum = np.cumprod(v, axis=1)
        cum[dead] = np.nan
        out[k] = cum
    final = out["treat"] * out["resp"] * out["death"]
    live = final[alive]
    if not np.all(np.isfinite(live)) or np.any(live <= 0):
        raise WeightError("non-finite or non-positive weight produced")
    return WeightSet(out["treat"], out["resp"], out["death"], final, comp, panel.ids)


@dataclass(frozen=True)
class PositivityReport:
    threshold: float
    min_prob: float
    max_prob: float
    weight_quantiles: dict
    max_weight: float
    max_unstabilized_weight: float
    n_flagged: int
    flagged_fraction: float
    flagged_ids: np.ndarray

    @property
    def clean(self) -> bool:
        return self.n_flagged == 0

    def summary(self) -> str:
        q = ", ".join(f"q{int(k * 100)}={v:.3g}" for k, v in self.weight_quantiles.items())
        return (f"fitted probabilities in [{self.min_prob:.3g}, {self.max_prob:.3g}]; "
                f"weights {q}; {self.n_flagged} subjects ({100 * self.flagged_fraction:.1f}%) "
                f"have an observed-event probability below {self.threshold}")


def check_positivity(weights: WeightSet, threshold: float = 0.01) -> PositivityReport:
    """Summarize how close the fitted denominators come to 0. Read-only."""
    dens = [v for k, v in weights.components.items() if k.endswith("_den")]
    n = weights.w_final.shape[0]
    if dens:
        D = np.stack(dens, axis=0)
        finite = np.isfinite(D)
        pmin = float(np.min(D[finite])) if finite.any() else float("nan")
        pmax = float(np.max(D[finite])) if finite.any() else float("nan")
        low = np.any(np.where(finite, D < threshold, False), axis=(0, 2))
        inv = np.where(finite, 1.0 / np.where(finite, D, 1.0), 1.0)
        unstab = float(np.nanmax(np.prod(inv, axis=(0, 2)))) if n else float("nan")
    else:
        pmin = pmax = unstab = float("nan")
        low = np.zeros(n, dtype=bool)
    wf = weights.w_final[np.isfinite(weights.w_final)]
    qs = (0.0, 0.01, 0.5, 0.99, 1.0)
    wq = {q: float(np.quantile(wf, q)) for q in qs} if wf.size else {}
    ids = np.arange(n) if weights.ids is None else weights.ids
    return PositivityReport(
        threshold, pmin, pmax, wq, float(wf.max()) if wf.size else float("nan"), unstab,
        int(low.sum()), float(low.mean()) if n else 0.0, ids[low],
    )


def _regime_means(panel, c: Contrast, weight_col, cw):
    t = c.wave
    seen = panel.r[:, t - 1] == 1
    y = panel.y[:, t - 1]
    means = []
    for regime in (c.treated, c.reference):
        rows = panel.follows(regime) & seen
        ww = weight_col[rows] * cw[rows]
        if rows.sum() == 0 or ww.sum() <= 0:
            raise EmptyCellError(f"contrast {c}: no weighted subjects follow {regime}")
        means.append(weighted_mean(ww, y[rows]))
    return means[0] - means[1]


def msm_estimate(panel: ObservedPanel, contrasts=None, n_boot: int = 200,
                 rng: np.random.Generator | None = None, numerator: str = "baseline",
                 backend=None, weights: WeightSet | None = None):
    """Weighted regime-mean differences with a percentile bootstrap interval.

    Weight models are refit inside every bootstrap sample unless fixed
    ``weights`` are supplied, in which case they are reused as given.
    """
    single = isinstance(contrasts, (str, Contrast))
    cs = as_contrasts([contrasts] if single else contrasts, panel.n_waves)
    rng = np.random.default_rng() if rng is None else rng
    if weights is None:
        panel = canonical(panel)
    ones = np.ones(panel.n)
    ws = weights if weights is not None else msm_weights(panel, numerator, backend, rng=rng)
    points = [_regime_means(panel, c, ws.w_final[:, c.wave - 1], ones) for c in cs]
    boot = [[] for _ in cs]
    for _ in range(n_boot):
        cnt = rng.multinomial(panel.n, np.full(panel.n, 1.0 / panel.n)).astype(float)
        try:
            wb = ws if weights is not None else msm_weights(panel, numerator, backend, counts=cnt, rng=rng)
            vals = [_regime_means(panel, c, wb.w_final[:, c.wave - 1], cnt) for c in cs]
        except (EmptyCellError, WeightError, FitError):
            continue
        for k, v in enumerate(vals):
            boot[k].append(v)
    out = []
    for c, pt, b in zip(cs, points, boot):
        b = np.asarray(b)
        if b.size < 2:
            out.append(BootstrapEstimate(c.label, pt, float("nan"), float("nan"), float("nan"), b.size, "msm"))
        else:
            out.append(percentile_interval(pt, b, c.label, "msm"))
    return out[0] if single else out
