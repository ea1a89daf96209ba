"""Principal-stratification imputation estimator.

Each bootstrap replicate completes the counterfactual data wave by wave:

1. survival entering wave ``t`` under every absorbing regime of length
   ``t - 1``, drawn jointly so that more treatment never means survival;
2. treatment-dependent covariates ``x`` at ``t`` under every regime;
3. (unless ``simplified``) the cumulative propensity of every regime, a
   product of fitted treatment probabilities on the probability scale;
4. outcomes at ``t`` under every regime for subjects alive under it, drawn
   from a backend model that includes the propensity as a predictor.

A contrast at wave ``t`` is the mean difference over subjects whose imputed or
observed survival is 1 under both regimes' length ``t - 1`` prefixes. Replicate
estimates are pooled with the multiple-imputation combining rules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..panel import Contrast, ObservedPanel, Regime, absorbing_regimes, as_contrasts
from .backends import make_backend
from .combine import CombinedEstimate, rubin_combine
from .common import (
    EmptyCellError, ReplicateError, canonical, child_rng, locf, observed_path_labels,
    replicate_base, stratified_indices,
)
from .missing import impute_missing_outcomes

MIN_CELL = 2


def draw_monotone_survival(prob: np.ndarray, allowed: np.ndarray, obs_index: np.ndarray,
                           obs_value: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Joint survival draw over a chain of regimes ordered from least to most treated.

    ``prob[:, j]`` is the fitted survival probability under regime ``j``,
    ``allowed[:, j]`` is False when survival is impossible (the subject is
    already dead under the regime's prefix), and ``obs_index``/``obs_value``
    give the regime observed for the subject (``-1`` if none) and its observed
    survival. Survival is generated through a latent last-surviving index
    ``J``: ``S_j = 1`` iff ``j <= J``, with ``P(J >= j)`` equal to the
    (monotonized) survival probability. Conditioning on the observed value
    and on the forbidden cells restricts ``J`` to an interval.
    """
    n, K = prob.shape
    p = np.where(allowed, prob, 0.0)
    p = np.maximum.accumulate(p[:, ::-1], axis=1)[:, ::-1]
    mass = np.column_stack([1.0 - p[:, 0], p[:, :-1] - p[:, 1:], p[:, -1]])
    mass = np.clip(mass, 0.0, None)
    lo = np.full(n, -1)
    hi = np.full(n, K - 1)
    j0 = np.where(allowed.all(axis=1), K, np.argmin(allowed, axis=1))
    hi = np.minimum(hi, j0 - 1)
    seen = obs_index >= 0
    alive_obs = seen & (obs_value == 1)
    dead_obs = seen & (obs_value == 0)
    lo[alive_obs] = obs_index[alive_obs]
    hi[dead_obs] = np.minimum(hi[dead_obs], obs_index[dead_obs] - 1)
    J = np.arange(-1, K)[None, :]
    ok = (J >= lo[:, None]) & (J <= hi[:, None])
    if not ok.any(axis=1).all():
        bad = int(np.flatnonzero(~ok.any(axis=1))[0])
        raise ValueError(f"row {bad}: observed survival contradicts the allowed pattern")
    m = np.where(ok, mass + 1e-12, 0.0)
    cdf = np.cumsum(m, axis=1)
    u = rng.random(n) * cdf[:, -1]
    last = (cdf < u[:, None]).sum(axis=1) - 1
    last = np.clip(last, lo, hi)
    return (np.arange(K)[None, :] <= last[:, None]).astype(float)


def _follows(panel: ObservedPanel, regime: Regime) -> np.ndarray:
    if not regime:
        return np.ones(panel.n, dtype=bool)
    return panel.follows(regime)


@dataclass
class Completion:
    """Observed plus imputed counterfactuals for one replicate.

    ``Y[r]`` is the outcome at wave ``len(r)`` under regime ``r`` (NaN when the
    subject is dead under ``r``'s prefix); ``S[r]`` is survival entering wave
    ``len(r) + 1`` under ``r``; ``X[r]`` holds treatment-dependent covariates.
    """

    Y: dict
    S: dict
    X: dict
    propensity: dict

    def stratum_mask(self, c: Contrast) -> np.ndarray:
        n = len(self.S[()])
        mask = np.ones(n, dtype=bool)
        for pre in c.stratum:
            mask &= self.S[pre] == 1
        return mask


class _Completer:
    def __init__(self, panel: ObservedPanel, backend, rng, simplified: bool):
        self.p = panel
        self.be = backend
        self.rng = rng
        self.simplified = simplified
        self.n = panel.n
        self.w = locf(panel.w)
        self.Y: dict = {}
        self.X: dict = {}
        self.S: dict = {(): np.ones(self.n)}
        self.pi: dict = {}
        self.P: dict = {}

    # predictors -----------------------------------------------------------
    def _features(self, regime: Regime, n_w: int, n_x: int, n_y: int) -> np.ndarray:
        cols = [self.p.v]
        if self.w is not None and n_w:
            cols.append(self.w[:, :n_w].reshape(self.n, -1))
        if self.p.x is not None:
            for k in range(1, n_x + 1):
                cols.append(self.X[regime[:k]])
        for k in range(1, n_y + 1):
            cols.append(self.Y[regime[:k]][:, None])
        return np.column_stack(cols)

    def _need(self, regime: Regime) -> np.ndarray:
        return self.S[regime[:-1]] == 1

    # steps ----------------------------------------------------------------
    def survival(self, t: int):
        chain = absorbing_regimes(t - 1)
        n, K = self.n, len(chain)
        prob = np.zeros((n, K))
        allowed = np.zeros((n, K), dtype=bool)
        obs_idx = np.full(n, -1)
        obs_val = np.zeros(n)
        event = self.p.s[:, t - 1]
        for j, rp in enumerate(chain):
            ok = self.S[rp[:-1]] == 1
            fol = self.p.follows(rp)
            if fol.sum() < MIN_CELL:
                raise EmptyCellError(f"regime {rp}: {int(fol.sum())} subjects to fit survival")
            F = self._features(rp, t - 1, t - 1, t - 1)
            model = self.be.fit_binary(F[fol], event[fol], self.rng)
            prob[ok, j] = model.prob(F[ok])
            allowed[:, j] = ok
            obs_idx[fol] = j
            obs_val[fol] = event[fol]
        S = draw_monotone_survival(prob, allowed, obs_idx, obs_val, self.rng)
        for j, rp in enumerate(chain):
            self.S[rp] = S[:, j]

    def covariates(self, t: int):
        x = self.p.x[:, t - 1, :]
        for r in absorbing_regimes(t):
            need = self._need(r)
            fol = self.p.follows(r) & np.all(np.isfinite(x), axis=1)
            if fol.sum() < MIN_CELL:
                raise EmptyCellError(f"regime {r}: {int(fol.sum())} subjects to fit covariates")
            F = self._features(r, t, t - 1, t - 1)
            Xr = np.full(x.shape, np.nan)
            Xr[fol] = x[fol]
            imp = need & ~fol
            for k in range(x.shape[1]):
                model = self.be.fit_outcome(F[fol], x[fol, k], self.rng)
                if imp.any():
                    Xr[imp, k] = model.draw(F[imp], self.rng)
            self.X[r] = Xr

    def treatment(self, t: int):
        base = (0,) * (t - 1)
        risk = _follows(self.p, base) & self.p.alive(t)
        z = self.p.z[:, t - 1]
        if risk.sum() < MIN_CELL:
            raise EmptyCellError(f"wave {t}: {int(risk.sum())} subjects at risk of treatment")
        F = self._features(base, t - 1, t - 1, t - 1)
        model = self.be.fit_binary(F[risk], z[risk], self.rng)
        ok = self.S[base[:-1]] == 1 if t > 1 else np.ones(self.n, dtype=bool)
        pi = np.full(self.n, np.nan)
        pi[ok] = model.prob(F[ok])
        self.pi[t] = pi
        for r in absorbing_regimes(t):
            k = r.index(1) + 1 if 1 in r else None
            prod = np.ones(self.n)
            for j in range(1, (k or t) + 1):
                prod = prod * (self.pi[j] if j == k else 1.0 - self.pi[j])
            self.P[r] = prod

    def outcomes(self, t: int):
        y = self.p.y[:, t - 1]
        for r in absorbing_regimes(t):
            need = self._need(r)
            fol = self.p.follows(r) & np.isfinite(y)
            if fol.sum() < MIN_CELL:
                raise EmptyCellError(f"regime {r}: {int(fol.sum())} subjects to fit outcomes")
            F = self._features(r, t, t, t - 1)
            prop = None if self.simplified else self.P[r]
            model = self.be.fit_outcome(F[fol], y[fol], self.rng,
                                        propensity=None if prop is None else prop[fol])
            Yr = np.full(self.n, np.nan)
            Yr[fol] = y[fol]
            imp = need & ~fol
            if imp.any():
                Yr[imp] = model.draw(F[imp], self.rng,
                                     propensity=None if prop is None else prop[imp])
            self.Y[r] = Yr

    def run(self) -> Completion:
        for t in range(1, self.p.n_waves + 1):
            if t > 1:
                self.survival(t)
            if self.p.x is not None:
                self.covariates(t)
            if not self.simplified:
                self.treatment(t)
            self.outcomes(t)
        return Completion(self.Y, self.S, self.X, self.P)


def complete_panel(panel: ObservedPanel, backend="glm", rng: np.random.Generator | None = None,
                   simplified: bool = False) -> Completion:
    """One imputation of all counterfactual survival, covariates and outcomes."""
    if not panel.absorbing:
        raise ValueError("the imputation estimator needs absorbing treatment")
    rng = np.random.default_rng() if rng is None else rng
    be = make_backend(backend)
    if np.any((panel.s == 1) & (panel.r == 0)):
        panel = impute_missing_outcomes(panel, be, rng)
    return _Completer(panel, be, rng, simplified).run()


def stratum_contrast(comp: Completion, c: Contrast) -> tuple[float, float, int]:
    """Stratum mean difference and its pooled within-replicate variance."""
    mask = comp.stratum_mask(c)
    ns = int(mask.sum())
    if ns < MIN_CELL:
        raise EmptyCellError(f"contrast {c}: principal stratum has {ns} subjects")
    ya, yb = comp.Y[c.treated][mask], comp.Y[c.reference][mask]
    if not (np.all(np.isfinite(ya)) and np.all(np.isfinite(yb))):
        raise RuntimeError(f"contrast {c}: stratum member without an imputed outcome")
    delta = float(ya.mean() - yb.mean())
    within = float((ya.var(ddof=1) + yb.var(ddof=1)) / ns)
    return delta, within, ns


def proposed_estimate(panel: ObservedPanel, contrasts=None, B: int = 50, backend="glm",
                      rng: np.random.Generator | None = None, simplified: bool = False,
                      stratified: bool = False, max_redraws: int | None = None,
                      return_replicates: bool = False):
    """Principal-stratum effects pooled over ``B`` bootstrap imputations.

    ``simplified`` skips the propensity steps (outcome models use history
    only). ``stratified`` resamples within observed treatment paths instead of
    plain unit resampling. Replicates with an empty cell or stratum are redrawn
    up to ``max_redraws`` times in total (default ``10 * B``).
    """
    single = isinstance(contrasts, (str, Contrast))
    cs = as_contrasts([contrasts] if single else contrasts, panel.n_waves)
    if B < 2:
        raise ValueError("need B >= 2 replicates")
    panel.validate()
    if not panel.absorbing:
        raise ValueError("the imputation estimator needs absorbing treatment")
    panel = canonical(panel)
    rng = np.random.default_rng() if rng is None else rng
    be = make_backend(backend)
    cap = 10 * B if max_redraws is None else max_redraws
    base = replicate_base(rng)
    groups = observed_path_labels(panel) if stratified else None
    deltas = np.zeros((B, len(cs)))
    within = np.zeros((B, len(cs)))
    redraws = 0
    for b in range(B):
        attempt = 0
        while True:
            rr = child_rng(base, b, attempt)
            if stratified:
                idx = stratified_indices(groups, rr)
            else:
                idx = np.sort(rr.integers(panel.n, size=panel.n))
            try:
                comp = complete_panel(panel.take(idx), be, rr, simplified)
                for k, c in enumerate(cs):
                    deltas[b, k], within[b, k], _ = stratum_contrast(comp, c)
                break
            except EmptyCellError:
                redraws += 1
                attempt += 1
                if redraws > cap:
                    raise EmptyCellError(f"more than {cap} replicates redrawn for empty cells")
            except Exception as exc:  # backend failure: report which replicate
                raise ReplicateError(b, exc) from exc
    out = [rubin_combine(deltas[:, k], within[:, k], c.label, method="proposed", n_redrawn=redraws)
           for k, c in enumerate(cs)]
    if return_replicates:
        return (out[0] if single else out), deltas, within
    return out[0] if single else out
