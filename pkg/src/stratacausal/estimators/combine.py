"""Multiple-imputation combining rules and estimate containers."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

# degrees of freedom used when the between-replicate variance is zero
NU_CAP = 1e6


@dataclass(frozen=True)
class CombinedEstimate:
    """Pooled estimate across ``B`` imputation replicates.

    ``T_B = W_bar + (1 + 1/B) D_between`` and the interval is
    ``delta_bar +/- t_nu sqrt(T_B)``.
    """

    contrast: str
    delta_bar: float
    W_bar: float
    D_between: float
    T_B: float
    nu: float
    ci_low: float
    ci_high: float
    B: int
    method: str = ""
    n_redrawn: int = 0

    @property
    def estimate(self) -> float:
        return self.delta_bar

    @property
    def se(self) -> float:
        return float(np.sqrt(self.T_B))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimate"] = self.estimate
        return d


@dataclass(frozen=True)
class BootstrapEstimate:
    """Point estimate with a percentile bootstrap interval."""

    contrast: str
    estimate: float
    ci_low: float
    ci_high: float
    se: float
    n_boot: int
    method: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def rubin_degrees_of_freedom(W_bar: float, D: float, B: int) -> float:
    if D <= 0:
        return NU_CAP
    ratio = W_bar / (D * (B + 1))
    # beyond this ratio the formula exceeds the cap anyway (and may overflow)
    if not np.isfinite(ratio) or ratio > np.sqrt(NU_CAP):
        return NU_CAP
    nu = (B - 1) * (1.0 + ratio) ** 2
    return float(min(max(nu, 1.0), NU_CAP))


def rubin_combine(deltas, within_vars, contrast: str = "", level: float = 0.95,
                  method: str = "", n_redrawn: int = 0) -> CombinedEstimate:
    deltas = np.asarray(deltas, dtype=float)
    within = np.asarray(within_vars, dtype=float)
    B = deltas.size
    if B < 2:
        raise ValueError(f"combining needs at least 2 replicates, got {B}")
    if within.shape != deltas.shape:
        raise ValueError("deltas and within-variances differ in length")
    if np.any(within < 0) or not np.all(np.isfinite(within)) or not np.all(np.isfinite(deltas)):
        raise ValueError("within-variances must be finite and non-negative")
    delta_bar = float(deltas.mean())
    W_bar = float(within.mean())
    D = float(deltas.var(ddof=1))
    T_B = W_bar + (1.0 + 1.0 / B) * D
    nu = rubin_degrees_of_freedom(W_bar, D, B)
    alpha = 1.0 - level
    if nu >= NU_CAP:
        crit = float(stats.norm.ppf(1 - alpha / 2))
    else:
        crit = float(stats.t.ppf(1 - alpha / 2, nu))
    half = crit * np.sqrt(T_B)
    return CombinedEstimate(
        contrast, delta_bar, W_bar, D, T_B, nu, delta_bar - half, delta_bar + half, B,
        method=method, n_redrawn=n_redrawn,
    )


def percentile_interval(point: float, boot: np.ndarray, contrast: str, method: str,
                        level: float = 0.95) -> BootstrapEstimate:
    boot = np.asarray(boot, dtype=float)
    alpha = 1.0 - level
    lo, hi = np.quantile(boot, [alpha / 2, 1 - alpha / 2])
    se = float(boot.std(ddof=1)) if boot.size > 1 else float("nan")
    return BootstrapEstimate(contrast, float(point), float(lo), float(hi), se, boot.size, method)
