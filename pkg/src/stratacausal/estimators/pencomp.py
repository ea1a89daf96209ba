"""Penalized spline of propensity for two-wave treatment comparisons.

Each replicate fits the propensity and outcome models on a bootstrap sample
(resampled within observed treatment groups) and uses them to impute every
counterfactual outcome in the original data. Outcomes are modelled as a
penalized truncated-linear spline in the logit of the regime propensity plus
a linear function of the other predictors. Contrasts average over all
subjects, so they are not restricted to survivors.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logit

from ..panel import Contrast, ObservedPanel, absorbing_regimes, as_contrasts
from ..regress import (
    WeightedDesign, clip_prob, draw_prediction, fit_logistic, fit_pspline, with_intercept,
)
from .combine import rubin_combine
from .common import (
    EmptyCellError, ReplicateError, canonical, child_rng, locf, observed_path_labels,
    replicate_base, stratified_indices,
)

MIN_CELL = 5


def _base_features(panel: ObservedPanel, t: int, w) -> np.ndarray:
    cols = [panel.v]
    if w is not None:
        cols.append(w[:, :t].reshape(panel.n, -1))
    return np.column_stack(cols)


class _Replicate:
    def __init__(self, orig: ObservedPanel, idx: np.ndarray, rng, T: int):
        self.o, self.b, self.rng, self.T = orig, orig.take(idx), rng, T
        self.idx = idx
        self.wo, self.wb = locf(orig.w), locf(self.b.w)
        self.Yo: dict = {}

    def _pi(self, t, Fb, Fo):
        """Fitted P(Z_t = 1) among subjects untreated before ``t`` and alive."""
        b = self.b
        risk = b.alive(t)
        if t > 1:
            risk &= b.z[:, t - 2] == 0
        z = b.z[risk, t - 1]
        if z.min() == z.max():
            return np.full(len(Fo), clip_prob(float(z[0])))
        fit = fit_logistic(WeightedDesign(with_intercept(Fb[risk]), z))
        return clip_prob(fit.predict(with_intercept(Fo)))

    def run(self):
        o, b = self.o, self.b
        pis = {}
        for t in range(1, self.T + 1):
            prev = [] if t == 1 else [self.Yo[(0,) * (t - 1)]]
            prevb = [] if t == 1 else [self.Yo[(0,) * (t - 1)][self.idx]]
            Fo = np.column_stack([_base_features(o, t, self.wo)] + [p[:, None] for p in prev])
            Fb = np.column_stack([_base_features(b, t, self.wb)] + [p[:, None] for p in prevb])
            pis[t] = self._pi(t, Fb, Fo)
            for r in absorbing_regimes(t):
                k = r.index(1) + 1 if 1 in r else None
                prop_o = np.ones(o.n)
                for j in range(1, (k or t) + 1):
                    prop_o = prop_o * (pis[j] if j == k else 1.0 - pis[j])
                self._outcome(r, t, clip_prob(prop_o))

    def _outcome(self, r, t, prop_o):
        o, b = self.o, self.b
        # bootstrap rows are original rows, so they share propensities and imputations
        idx = self.idx
        prop_b = prop_o[idx]
        cols_o = [_base_features(o, t, self.wo)]
        cols_b = [_base_features(b, t, self.wb)]
        for k in range(1, t):
            cols_o.append(self.Yo[r[:k]][:, None])
            cols_b.append(self.Yo[r[:k]][idx][:, None])
        Fo, Fb = np.column_stack(cols_o), np.column_stack(cols_b)
        fol_b = b.follows(r) & (b.r[:, t - 1] == 1)
        if fol_b.sum() < MIN_CELL:
            raise EmptyCellError(f"regime {r}: {int(fol_b.sum())} subjects in the bootstrap sample")
        fit = fit_pspline(logit(prop_b[fol_b]),
                          WeightedDesign(with_intercept(Fb[fol_b]), b.y[fol_b, t - 1]))
        fol_o = o.follows(r) & (o.r[:, t - 1] == 1)
        Y = np.where(fol_o, o.y[:, t - 1], np.nan)
        imp = ~fol_o
        Y[imp] = draw_prediction(fit, with_intercept(Fo[imp]), self.rng, logit(prop_o[imp]))
        self.Yo[r] = Y


def pencomp_estimate(panel: ObservedPanel, contrasts=None, B: int = 50,
                     rng: np.random.Generator | None = None, stratified: bool = True,
                     max_redraws: int | None = None, return_replicates: bool = False):
    """Two-wave spline-of-propensity imputation pooled over ``B`` bootstraps."""
    single = isinstance(contrasts, (str, Contrast))
    T = min(panel.n_waves, 2)
    cs = as_contrasts([contrasts] if single else contrasts, T)
    if B < 2:
        raise ValueError("need B >= 2 replicates")
    if not panel.absorbing:
        raise ValueError("this estimator needs absorbing treatment")
    panel.validate()
    panel = canonical(panel.truncate(T))
    rng = np.random.default_rng() if rng is None else rng
    cap = 10 * B if max_redraws is None else max_redraws
    base = replicate_base(rng)
    groups = observed_path_labels(panel)
    deltas = np.zeros((B, len(cs)))
    within = np.zeros((B, len(cs)))
    redraws = 0
    n = panel.n
    for b in range(B):
        attempt = 0
        while True:
            rr = child_rng(base, b, attempt)
            idx = stratified_indices(groups, rr) if stratified else np.sort(rr.integers(n, size=n))
            try:
                rep = _Replicate(panel, idx, rr, T)
                rep.run()
                for k, c in enumerate(cs):
                    ya, yb = rep.Yo[c.treated], rep.Yo[c.reference]
                    deltas[b, k] = float(np.mean(ya - yb))
                    within[b, k] = float((ya.var(ddof=1) + yb.var(ddof=1)) / n)
                break
            except EmptyCellError:
                redraws += 1
                attempt += 1
                if redraws > cap:
                    raise EmptyCellError(f"more than {cap} replicates redrawn for empty cells")
            except Exception as exc:
                raise ReplicateError(b, exc) from exc
    out = [rubin_combine(deltas[:, k], within[:, k], c.label, method="pencomp", n_redrawn=redraws)
           for k, c in enumerate(cs)]
    if return_replicates:
        return (out[0] if single else out), deltas, within
    return out[0] if single else out
