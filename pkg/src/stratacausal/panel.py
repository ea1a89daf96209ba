"""Observed longitudinal panel and treatment-regime bookkeeping.

A panel holds one row per subject and one column per wave. Missing cells are
NaN. Two kinds of missingness are distinguished by the survival matrix: a
subject not alive entering wave ``t`` has *structurally* missing ``y``, ``z``
and ``x`` at ``t``; a subject alive with ``r[:, t] == 0`` merely dropped out.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

Regime = tuple[int, ...]


class PanelValidationError(ValueError):
    """Raised when a panel violates a structural invariant."""


def parse_regime(label: str | Sequence[int]) -> Regime:
    if isinstance(label, str):
        label = label.strip()
        if not label or set(label) - {"0", "1"}:
            raise ValueError(f"bad regime label {label!r}")
        return tuple(int(c) for c in label)
    return tuple(int(c) for c in label)


def regime_label(regime: Regime) -> str:
    return "".join(str(int(c)) for c in regime)


def absorbing_regimes(t: int) -> list[Regime]:
    """Regimes of length ``t`` with absorbing treatment, least treated first.

    >>> absorbing_regimes(2)
    [(0, 0), (0, 1), (1, 1)]
    """
    return [(0,) * (t - k) + (1,) * k for k in range(t + 1)]


def is_absorbing(regime: Regime) -> bool:
    return all(a <= b for a, b in zip(regime, regime[1:]))


@dataclass(frozen=True)
class Contrast:
    """Difference ``E[Y_treated - Y_reference]`` at wave ``len(treated)``.

    The principal stratum is every subject who survives entering the final
    wave under both regimes, i.e. under both length ``t - 1`` prefixes.
    """

    treated: Regime
    reference: Regime

    def __post_init__(self):
        if len(self.treated) != len(self.reference) or not self.treated:
            raise ValueError("contrast regimes must share a positive length")
        if self.treated == self.reference:
            raise ValueError("contrast regimes must differ")

    @classmethod
    def parse(cls, label: str) -> "Contrast":
        a, _, b = label.partition(",")
        return cls(parse_regime(a), parse_regime(b))

    @property
    def wave(self) -> int:
        return len(self.treated)

    @property
    def label(self) -> str:
        return f"{regime_label(self.treated)},{regime_label(self.reference)}"

    @property
    def stratum(self) -> tuple[Regime, ...]:
        """Survival prefixes that must both equal 1 (empty at wave 1)."""
        if self.wave == 1:
            return ()
        prefixes = {self.treated[:-1], self.reference[:-1]}
        return tuple(sorted(prefixes))

    def __str__(self) -> str:
        return self.label


def default_contrasts(n_waves: int) -> list[Contrast]:
    """All pairwise absorbing-regime contrasts, ordered wave by wave.

    Within a wave the reference regime advances slowest, which gives the
    ordering 1,0 / 01,00 / 11,00 / 11,01 / 001,000 / ... used in reports.
    """
    out = []
    for t in range(1, n_waves + 1):
        chain = absorbing_regimes(t)
        for i, ref in enumerate(chain):
            for trt in chain[i + 1:]:
                out.append(Contrast(trt, ref))
    return out


def as_contrasts(contrasts: Iterable[Contrast | str] | None, n_waves: int) -> list[Contrast]:
    if contrasts is None:
        return default_contrasts(n_waves)
    out = [c if isinstance(c, Contrast) else Contrast.parse(c) for c in contrasts]
    for c in out:
        if c.wave > n_waves:
            raise ValueError(f"contrast {c} needs {c.wave} waves, panel has {n_waves}")
    return out


@dataclass(frozen=True)
class ObservedPanel:
    """Realized longitudinal records.

    Attributes
    ----------
    v : (n, p) array
        Baseline covariates.
    z, y, s, r : (n, T) arrays
        Treatment, outcome, alive-entering-wave and response indicators.
        ``s[:, 0]`` is 1 for every subject.
    w, x : (n, T, q) arrays or None
        Time-varying covariates unaffected (``w``) and affected (``x``) by
        treatment.
    source_index : (n,) int array or None
        Row of the generating population, when the panel came from the DGP.
    """

    v: np.ndarray
    z: np.ndarray
    y: np.ndarray
    s: np.ndarray
    r: np.ndarray
    ids: np.ndarray | None = None
    w: np.ndarray | None = None
    x: np.ndarray | None = None
    v_names: tuple[str, ...] = ()
    w_names: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()
    absorbing: bool = True
    source_index: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        n = self.z.shape[0]
        v = np.asarray(self.v, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "v", v)
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(n))
        if not self.v_names:
            names = ("v",) if v.shape[1] == 1 else tuple(f"v{j + 1}" for j in range(v.shape[1]))
            object.__setattr__(self, "v_names", names)
        for name in ("w", "x"):
            arr = getattr(self, name)
            if arr is not None and not getattr(self, f"{name}_names"):
                object.__setattr__(
                    self, f"{name}_names", tuple(f"{name}{j + 1}" for j in range(arr.shape[2]))
                )
        shapes = {a.shape for a in (self.z, self.y, self.s, self.r)}
        if len(shapes) != 1 or v.shape[0] != n:
            raise PanelValidationError("panel arrays disagree in shape")

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def n_waves(self) -> int:
        return self.z.shape[1]

    def alive(self, t: int) -> np.ndarray:
        """Boolean mask of subjects alive entering wave ``t`` (1-based)."""
        return self.s[:, t - 1] == 1

    def follows(self, regime: Regime) -> np.ndarray:
        """Subjects alive at wave ``len(regime)`` whose observed path is ``regime``."""
        t = len(regime)
        mask = self.alive(t)
        for j, a in enumerate(regime):
            mask &= self.z[:, j] == a
        return mask

    def take(self, idx: np.ndarray) -> "ObservedPanel":
        """Row subset (with repetition allowed, as in a bootstrap)."""
        sub = lambda a: None if a is None else a[idx]
        return replace(
            self,
            v=self.v[idx], z=self.z[idx], y=self.y[idx], s=self.s[idx], r=self.r[idx],
            ids=self.ids[idx], w=sub(self.w), x=sub(self.x), source_index=sub(self.source_index),
        )

    def truncate(self, n_waves: int) -> "ObservedPanel":
        cut = lambda a: None if a is None else a[:, :n_waves]
        return replace(
            self, z=self.z[:, :n_waves], y=self.y[:, :n_waves], s=self.s[:, :n_waves],
            r=self.r[:, :n_waves], w=cut(self.w), x=cut(self.x),
        )

    def with_outcomes(self, y: np.ndarray, r: np.ndarray | None = None) -> "ObservedPanel":
        return replace(self, y=y, r=self.r if r is None else r)

    def validate(self) -> None:
        """Check structural invariants; raise naming the first offending subject."""
        s, T = self.s, self.n_waves
        if np.any(s[:, 0] != 1):
            bad = np.flatnonzero(s[:, 0] != 1)[0]
            raise PanelValidationError(f"subject {self.ids[bad]}: not alive at wave 1")
        if np.any(~np.isin(s, (0, 1))):
            bad = np.flatnonzero(~np.isin(s, (0, 1)).all(axis=1))[0]
            raise PanelValidationError(f"subject {self.ids[bad]}: survival must be 0/1")
        resurrect = (s[:, 1:] > s[:, :-1]).any(axis=1)
        if resurrect.any():
            bad = np.flatnonzero(resurrect)[0]
            raise PanelValidationError(
                f"subject {self.ids[bad]}: death is absorbing but survival returns to 1"
            )
        dead = s == 0
        leaks = [("y", self.y), ("z", self.z)]
        if self.x is not None:
            leaks.append(("x", np.isfinite(self.x).any(axis=2).astype(float)))
        for name, arr in leaks:
            if name == "x":
                bad_rows = (dead & (arr == 1)).any(axis=1)
            else:
                bad_rows = (dead & np.isfinite(arr)).any(axis=1)
            if bad_rows.any():
                bad = np.flatnonzero(bad_rows)[0]
                raise PanelValidationError(
                    f"subject {self.ids[bad]}: {name} recorded after death"
                )
        alive = ~dead
        if np.any(alive & ~np.isin(self.z, (0, 1))):
            bad = np.flatnonzero((alive & ~np.isin(self.z, (0, 1))).any(axis=1))[0]
            raise PanelValidationError(f"subject {self.ids[bad]}: treatment missing or non-binary")
        if np.any(alive & ~np.isin(self.r, (0, 1))):
            bad = np.flatnonzero((alive & ~np.isin(self.r, (0, 1))).any(axis=1))[0]
            raise PanelValidationError(f"subject {self.ids[bad]}: response indicator missing")
        unobserved = alive & (self.r == 1) & ~np.isfinite(self.y)
        if unobserved.any():
            bad = np.flatnonzero(unobserved.any(axis=1))[0]
            raise PanelValidationError(f"subject {self.ids[bad]}: r=1 but outcome missing")
        if self.absorbing and T > 1:
            z = np.where(alive, self.z, np.nan)
            back = (z[:, :-1] == 1) & (z[:, 1:] == 0)
            if back.any():
                bad = np.flatnonzero(back.any(axis=1))[0]
                raise PanelValidationError(
                    f"subject {self.ids[bad]}: treatment is absorbing but returns to 0"
                )
