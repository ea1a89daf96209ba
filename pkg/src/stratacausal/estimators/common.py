"""Shared plumbing: canonical row order, replicate seeding, history features."""

from __future__ import annotations

import numpy as np

from ..panel import ObservedPanel


class EmptyCellError(RuntimeError):
    """A regime cell or principal stratum has too few subjects in a replicate."""


class ReplicateError(RuntimeError):
    """A backend failed inside a bootstrap replicate."""

    def __init__(self, replicate: int, cause: Exception):
        super().__init__(f"replicate {replicate}: {type(cause).__name__}: {cause}")
        self.replicate = replicate
        self.cause = cause


def canonical(panel: ObservedPanel) -> ObservedPanel:
    """Rows sorted by subject id, so results do not depend on input order."""
    order = np.argsort(panel.ids, kind="stable")
    if np.array_equal(order, np.arange(panel.n)):
        return panel
    return panel.take(order)


def replicate_base(rng: np.random.Generator) -> int:
    return int(rng.integers(2**63 - 1))


def child_rng(base: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([base, *keys]))


def weighted_mean(w: np.ndarray, y: np.ndarray) -> float:
    """Shared by the survivor and weighted estimators so that unit weights
    reproduce the unweighted bootstrap bit for bit. Sequential sums keep the
    result independent of array alignment, which BLAS dot products are not."""
    return float(np.cumsum(w * y)[-1] / np.cumsum(w)[-1])


def locf(arr: np.ndarray | None) -> np.ndarray | None:
    """Carry the last finite value forward along the wave axis (axis 1)."""
    if arr is None:
        return None
    out = np.array(arr, dtype=float, copy=True)
    for t in range(1, out.shape[1]):
        gap = ~np.isfinite(out[:, t])
        out[:, t][gap] = out[:, t - 1][gap]
    return out


def stratified_indices(groups: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bootstrap row indices resampled separately within each group."""
    idx = []
    for g in np.unique(groups):
        rows = np.flatnonzero(groups == g)
        idx.append(rows[rng.integers(len(rows), size=len(rows))])
    return np.sort(np.concatenate(idx))


def observed_path_labels(panel: ObservedPanel) -> np.ndarray:
    """Observed treatment path up to the last wave alive, e.g. ``"01"`` or ``"1-"``."""
    T = panel.n_waves
    out = []
    for i in range(panel.n):
        chars = []
        for t in range(T):
            chars.append(str(int(panel.z[i, t])) if panel.s[i, t] == 1 else "-")
        out.append("".join(chars))
    return np.array(out)
