"""Model backends used by the imputation estimators.

A backend fits two kinds of model on a plain feature matrix: a continuous
outcome model exposing ``mean`` and predictive ``draw``, and a binary model
exposing ``prob``. Propensity scores, when used, are passed separately so the
spline backend can expand them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import bart as _bart
from ..regress import (
    FitError, WeightedDesign, clip_prob, draw_prediction, fit_linear, fit_logistic,
    fit_pspline, with_intercept,
)


def _append(X: np.ndarray, propensity) -> np.ndarray:
    if propensity is None:
        return X
    return np.column_stack([X, propensity])


@dataclass(frozen=True)
class ConstantBinary:
    p: float

    def prob(self, X, propensity=None) -> np.ndarray:
        return np.full(len(X), self.p)


@dataclass(frozen=True)
class ConstantOutcome:
    mu: float
    sd: float

    def mean(self, X, propensity=None) -> np.ndarray:
        return np.full(len(X), self.mu)

    def draw(self, X, rng, propensity=None) -> np.ndarray:
        return self.mu + self.sd * rng.standard_normal(len(X))


def _constant_binary(y) -> ConstantBinary:
    return ConstantBinary(float(clip_prob(np.mean(y))))


@dataclass(frozen=True)
class _GlmOutcome:
    fit: object

    def mean(self, X, propensity=None):
        return self.fit.predict(with_intercept(_append(X, propensity)))

    def draw(self, X, rng, propensity=None):
        return draw_prediction(self.fit, with_intercept(_append(X, propensity)), rng)


@dataclass(frozen=True)
class _GlmBinary:
    fit: object

    def prob(self, X, propensity=None):
        return clip_prob(self.fit.predict(with_intercept(_append(X, propensity))))


class GlmBackend:
    """Normal linear regression for outcomes, logistic regression for binaries."""

    name = "glm"

    def fit_outcome(self, X, y, rng=None, propensity=None):
        return _GlmOutcome(fit_linear(WeightedDesign(with_intercept(_append(X, propensity)), y)))

    def fit_binary(self, X, y, rng=None, propensity=None):
        y = np.asarray(y, dtype=float)
        if y.min() == y.max():
            return _constant_binary(y)
        return _GlmBinary(fit_logistic(WeightedDesign(with_intercept(_append(X, propensity)), y)))


@dataclass(frozen=True)
class _BartOutcome:
    post: _bart.BartPosterior

    def mean(self, X, propensity=None):
        return _bart.bart_predict(self.post, _append(X, propensity)).mean(axis=0)

    def draw(self, X, rng, propensity=None):
        return _bart.bart_draw(self.post, _append(X, propensity), rng)


@dataclass(frozen=True)
class _BartBinary:
    post: _bart.BartPosterior

    def prob(self, X, propensity=None):
        return clip_prob(_bart.bart_predict(self.post, _append(X, propensity)).mean(axis=0))


def _has_split(X) -> bool:
    X = np.asarray(X, dtype=float)
    for j in range(X.shape[1]):
        col = X[:, j][np.isfinite(X[:, j])]
        if col.size and col.min() < col.max():
            return True
    return False


class BartBackend:
    """BART for outcomes and probit BART for binaries.

    A fit with no splittable column falls back to a constant model.
    """

    name = "bart"

    def __init__(self, config: _bart.BartConfig = _bart.DESK_CONFIG):
        self.config = config

    def fit_outcome(self, X, y, rng, propensity=None):
        Xp = _append(X, propensity)
        y = np.asarray(y, dtype=float)
        if not _has_split(Xp):
            return ConstantOutcome(float(y.mean()), float(y.std(ddof=1)) if len(y) > 1 else 0.0)
        return _BartOutcome(_bart.bart_fit(Xp, y, self.config, rng))

    def fit_binary(self, X, y, rng, propensity=None):
        Xp = _append(X, propensity)
        y = np.asarray(y, dtype=float)
        if y.min() == y.max() or not _has_split(Xp):
            return _constant_binary(y)
        return _BartBinary(_bart.bart_fit_probit(Xp, y, self.config, rng))


@dataclass(frozen=True)
class _SplineOutcome:
    fit: object
    linear: bool

    def _X(self, X):
        return with_intercept(X)

    def mean(self, X, propensity=None):
        if self.linear:
            return self.fit.predict(self._X(X))
        return self.fit.predict(self._X(X), propensity)

    def draw(self, X, rng, propensity=None):
        if self.linear:
            return draw_prediction(self.fit, self._X(X), rng)
        return draw_prediction(self.fit, self._X(X), rng, propensity)


class SplineBackend:
    """Penalized spline of the propensity for outcomes; probit BART for binaries.

    Without a propensity (or with a constant one) the outcome model reduces to
    a linear regression on the remaining predictors.
    """

    name = "pspline"

    def __init__(self, config: _bart.BartConfig = _bart.DESK_CONFIG):
        self._binary = BartBackend(config)

    def fit_outcome(self, X, y, rng=None, propensity=None):
        design = WeightedDesign(with_intercept(X), y)
        if propensity is None or np.ptp(propensity) == 0:
            return _SplineOutcome(fit_linear(design), linear=True)
        return _SplineOutcome(fit_pspline(propensity, design), linear=False)

    def fit_binary(self, X, y, rng, propensity=None):
        return self._binary.fit_binary(X, y, rng, propensity)


def make_backend(name, bart_config: _bart.BartConfig | None = None):
    if not isinstance(name, str):
        return name
    cfg = _bart.DESK_CONFIG if bart_config is None else bart_config
    if name == "glm":
        return GlmBackend()
    if name == "bart":
        return BartBackend(cfg)
    if name in ("pspline", "pspline+bart"):
        return SplineBackend(cfg)
    raise ValueError(f"unknown backend {name!r}; expected glm, bart or pspline")


__all__ = [
    "GlmBackend", "BartBackend", "SplineBackend", "make_backend", "ConstantBinary",
    "ConstantOutcome", "FitError",
]
