"""Deterministic regression backends: weighted least squares, logistic
regression by IRLS, and a penalized truncated-linear spline of the
propensity score.

All fits drop aliased columns through a pivoted QR of the (weighted) design
instead of failing; dropped columns get coefficient 0. Case weights are
treated as frequency weights up to scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

PROB_CLIP = 1e-6
_ETA_CLIP = 30.0


class FitError(ValueError):
    pass


def clip_prob(p):
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


@dataclass(frozen=True)
class WeightedDesign:
    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if X.shape[0] != y.shape[0]:
            raise FitError(f"design has {X.shape[0]} rows but response has {y.shape[0]}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != y.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise FitError("weights must be finite, non-negative and one per row")
            object.__setattr__(self, "weights", w)
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise FitError("design contains NA cells; resolve missingness first")

    @property
    def w(self) -> np.ndarray:
        return np.ones(len(self.y)) if self.weights is None else self.weights


def with_intercept(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(len(X)), X])


@dataclass(frozen=True)
class FitArtifact:
    """A fitted backend.

    ``coefficients`` has one entry per design column (aliased columns hold 0
    and are marked False in ``kept``). For ``pspline`` fits the design seen by
    ``predict`` is the parametric block; the propensity is passed separately
    and expanded with ``knots``.
    """

    kind: str
    coefficients: np.ndarray
    kept: np.ndarray
    residual_sd: float = float("nan")
    knots: np.ndarray | None = None
    penalty: float = 0.0
    convergence: str = "converged"
    n_iter: int = 0
    edf: float = float("nan")
    extra: dict = field(default_factory=dict, compare=False)

    def _design(self, X, propensity=None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if self.kind == "pspline":
            if propensity is None:
                raise FitError("pspline prediction needs the propensity argument")
            p = np.asarray(propensity, dtype=float)
            X = np.column_stack([X, p, truncated_linear(p, self.knots)])
        if X.shape[1] != len(self.coefficients):
            raise FitError(
                f"expected {len(self.coefficients)} columns, got {X.shape[1]}"
            )
        return X

    def linear_predictor(self, X, propensity=None) -> np.ndarray:
        return self._design(X, propensity) @ self.coefficients

    def predict(self, X, propensity=None) -> np.ndarray:
        eta = self.linear_predictor(X, propensity)
        if self.kind == "logistic":
            return expit(np.clip(eta, -_ETA_CLIP, _ETA_CLIP))
        return eta


def _pivot_rank(A: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Boolean mask of columns kept by a rank-revealing pivoted QR."""
    p = A.shape[1]
    if p == 0:
        return np.zeros(0, dtype=bool)
    _, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if tol is None:
        tol = max(A.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0) * 1e3
    rank = int(np.sum(d > tol)) if d.size and d[0] > 0 else 0
    kept = np.zeros(p, dtype=bool)
    kept[piv[:rank]] = True
    return kept


def fit_linear(design: WeightedDesign) -> FitArtifact:
    """Weighted least squares.

    ``residual_sd`` is ``sqrt(sum(w r^2) / mean(w) / (n - p))`` where ``n``
    counts rows with positive weight, so rescaling all weights changes nothing.
    """
    X, y, w = design.X, design.y, design.w
    pos = w > 0
    n = int(pos.sum())
    sw = np.sqrt(w)
    A = X * sw[:, None]
    kept = _pivot_rank(A)
    p = int(kept.sum())
    if n <= p:
        raise FitError(f"need more rows ({n}) than non-aliased columns ({p})")
    coef = np.zeros(X.shape[1])
    sol, *_ = linalg.lstsq(A[:, kept], y * sw, lapack_driver="gelsy")
    coef[kept] = sol
    resid = y - X @ coef
    rss = float(np.sum(w * resid**2) / np.mean(w[pos]))
    sd = float(np.sqrt(max(rss, 0.0) / (n - p)))
    return FitArtifact("linear", coef, kept, residual_sd=sd)


def draw_prediction(fit: FitArtifact, newrows, rng: np.random.Generator, propensity=None) -> np.ndarray:
    """Mean prediction plus independent ``N(0, residual_sd^2)`` noise per row."""
    if fit.kind not in ("linear", "pspline"):
        raise FitError(f"predictive draws need a linear or pspline fit, got {fit.kind}")
    mu = fit.predict(newrows, propensity)
    if fit.residual_sd == 0:
        return mu
    return mu + rng.normal(0.0, fit.residual_sd, size=mu.shape)


def _logistic_loglik(X, y, w, beta) -> float:
    eta = np.clip(X @ beta, -_ETA_CLIP * 10, _ETA_CLIP * 10)
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_logistic(design: WeightedDesign, max_iter: int = 100) -> FitArtifact:
    """Maximum likelihood logistic regression by iteratively reweighted least squares.

    Stops when ``max |score| < 1e-8`` or the relative change in deviance drops
    below ``1e-10``. The fit is flagged ``separated`` when a coefficient on the
    standardized scale exceeds 15 in absolute value; predictions are still
    strictly inside (0, 1).
    """
    X, y, w = design.X, design.y, design.w
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise FitError("logistic response must be 0/1")
    kept = _pivot_rank(X * np.sqrt(w)[:, None])
    Xk = X[:, kept]
    beta = np.zeros(Xk.shape[1])
    ybar = np.sum(w * y) / np.sum(w)
    # start from the marginal rate on the intercept column when there is one
    const = np.flatnonzero(np.all(Xk == Xk[:1], axis=0) & (Xk[0] != 0)) if len(Xk) else []
    if len(const) and 0 < ybar < 1:
        beta[const[0]] = np.log(ybar / (1 - ybar)) / Xk[0, const[0]]
    dev_old = -2 * _logistic_loglik(Xk, y, w, beta)
    status, it = "max-iter", 0
    for it in range(1, max_iter + 1):
        eta = np.clip(Xk @ beta, -_ETA_CLIP, _ETA_CLIP)
        mu = expit(eta)
        var = np.maximum(mu * (1 - mu), 1e-12)
        score = Xk.T @ (w * (y - mu))
        if np.max(np.abs(score), initial=0.0) < 1e-8:
            status = "converged"
            break
        H = (Xk * (w * var)[:, None]).T @ Xk
        try:
            step = linalg.solve(H, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(H, score)[0]
        beta_new = beta + step
        dev_new = -2 * _logistic_loglik(Xk, y, w, beta_new)
        # step halving keeps the deviance from increasing
        halvings = 0
        while dev_new > dev_old + 1e-12 * abs(dev_old) and halvings < 30:
            step /= 2
            beta_new = beta + step
            dev_new = -2 * _logistic_loglik(Xk, y, w, beta_new)
            halvings += 1
        beta = beta_new
        rel = abs(dev_old - dev_new) / max(abs(dev_new), 1e-300)
        dev_old = dev_new
        if rel < 1e-10:
            status = "converged"
            break
    coef = np.zeros(X.shape[1])
    coef[kept] = beta
    sd = Xk.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    if np.any(np.abs(beta * scale) > 15):
        status = "separated"
    return FitArtifact("logistic", coef, kept, convergence=status, n_iter=it)


def logistic_score(design: WeightedDesign, coefficients) -> np.ndarray:
    X, y, w = design.X, design.y, design.w
    mu = expit(X @ coefficients)
    return X.T @ (w * (y - mu))


def knot_count(n: int) -> int:
    return max(1, min(15, n // 20))


def spline_knots(propensity, n_knots: int) -> np.ndarray:
    p = np.asarray(propensity, dtype=float)
    if n_knots < 1:
        raise FitError("need at least one knot")
    if not np.all(np.isfinite(p)):
        raise FitError("propensity values must be finite")
    if np.ptp(p) == 0:
        raise FitError("propensity is constant; nothing to place knots on")
    probs = np.arange(1, n_knots + 1) / (n_knots + 1)
    return np.quantile(p, probs)


def truncated_linear(propensity, knots) -> np.ndarray:
    p = np.asarray(propensity, dtype=float)
    return np.maximum(p[:, None] - np.asarray(knots)[None, :], 0.0)


def pspline_basis(propensity, n_knots: int) -> np.ndarray:
    """Truncated-linear basis ``(p - k)_+`` with knots at equally spaced sample
    quantiles of ``propensity``."""
    return truncated_linear(propensity, spline_knots(propensity, n_knots))


PENALTY_GRID = np.logspace(-6, 6, 49)


def fit_pspline(propensity, parametric: WeightedDesign, n_knots: int | None = None,
                penalty: float | None = None, grid=PENALTY_GRID) -> FitArtifact:
    """Outcome regression with a penalized spline in the propensity.

    The design is ``[parametric, p, (p - k_1)_+, ..., (p - k_K)_+]``. Only the
    truncated-linear coefficients are ridge-penalized. Unless ``penalty`` is
    given it is chosen by generalized cross-validation over ``grid`` (scaled
    by the mean diagonal of the spline block of the cross-product matrix).
    """
    p = np.asarray(propensity, dtype=float)
    X0, y, w = parametric.X, parametric.y, parametric.w
    if len(p) != len(y):
        raise FitError("propensity length does not match the design")
    n = int(np.sum(w > 0))
    knots = spline_knots(p, knot_count(n) if n_knots is None else n_knots)
    Z = truncated_linear(p, knots)
    Xf = np.column_stack([X0, p])
    kept_f = _pivot_rank(Xf * np.sqrt(w)[:, None])
    # degenerate knots (all rows on one side) give zero columns
    kept_z = Z[w > 0].std(axis=0) > 0
    A = np.column_stack([Xf[:, kept_f], Z[:, kept_z]])
    pf, pz = int(kept_f.sum()), int(kept_z.sum())
    if n <= pf:
        raise FitError(f"need more rows ({n}) than parametric columns ({pf})")
    wn = w / np.mean(w[w > 0])
    G = (A * wn[:, None]).T @ A
    b = (A * wn[:, None]).T @ y
    D = np.zeros(pf + pz)
    D[pf:] = 1.0
    scale = float(np.mean(np.diag(G)[pf:])) if pz else 1.0

    def solve(lam):
        M = G + lam * scale * np.diag(D)
        try:
            cf = linalg.solve(M, b, assume_a="pos")
            edf = float(np.trace(linalg.solve(M, G, assume_a="pos")))
        except (linalg.LinAlgError, ValueError):
            Mi = linalg.pinvh(M)
            cf, edf = Mi @ b, float(np.trace(Mi @ G))
        rss = float(np.sum(wn * (y - A @ cf) ** 2))
        return cf, edf, rss

    if penalty is not None:
        lam = float(penalty)
        cf, edf, rss = solve(lam)
    elif pz == 0:
        lam = 0.0
        cf, edf, rss = solve(0.0)
    else:
        best = None
        for lam_try in grid:
            cf_t, edf_t, rss_t = solve(lam_try)
            denom = max(n - edf_t, 1e-8)
            gcv = n * rss_t / denom**2
            if best is None or gcv < best[0] - 1e-12 * abs(best[0]):
                best = (gcv, lam_try, cf_t, edf_t, rss_t)
        _, lam, cf, edf, rss = best
    coef = np.zeros(Xf.shape[1] + Z.shape[1])
    kept = np.concatenate([kept_f, kept_z])
    coef[kept] = cf
    dof = max(n - edf, 1.0)
    sd = float(np.sqrt(max(rss, 0.0) / dof))
    return FitArtifact(
        "pspline", coef, kept, residual_sd=sd, knots=knots, penalty=lam, edf=edf,
        extra={"penalty_scale": scale},
    )
