"""Shared data model: observations, masks, covariates, factor moments, precisions.

All containers here are plain ``numpy``-backed dataclasses. ``DataMatrix`` and
``SideInfo`` are frozen snapshots (their arrays are marked read-only) so they
can be shared freely; ``FactorState`` is working state owned by the fitting
loop, which is the single writer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "DataMatrix",
    "SideInfo",
    "PrecisionStructure",
    "PrecisionModel",
    "FactorState",
    "NormalMeansInput",
    "expand_precision",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, order="C")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class DataMatrix:
    """An n x p observation matrix with an observed-entry mask.

    Unobserved entries are stored as 0.0 with ``mask`` False and are excluded
    from every likelihood computation. Use :meth:`from_dense` (NaN = missing)
    or :meth:`from_coo` (absent coordinate = missing) to construct.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-d, got shape {values.shape}")
        if values.shape != mask.shape:
            raise ValueError(
                f"values shape {values.shape} != mask shape {mask.shape}"
            )
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError("matrix must have at least one row and column")
        if not np.all(np.isfinite(values[mask])):
            raise ValueError("observed entries must be finite")
        # zero out unobserved storage so masked sums can skip explicit masking
        values = np.where(mask, values, 0.0)
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_dense(cls, values, mask=None) -> "DataMatrix":
        """Build from a dense array; NaN entries (or ``mask`` False) are missing."""
        values = np.asarray(values, dtype=float)
        finite = np.isfinite(values)
        if mask is None:
            mask = finite
        else:
            mask = np.asarray(mask, dtype=bool) & finite
        return cls(np.where(mask, values, 0.0), mask)

    @classmethod
    def from_coo(cls, rows, cols, vals, shape=None) -> "DataMatrix":
        """Build from 0-indexed coordinate triples; duplicate cells keep the last value."""
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        vals = np.asarray(vals, dtype=float)
        if not (rows.shape == cols.shape == vals.shape) or rows.ndim != 1:
            raise ValueError("rows, cols, vals must be equal-length 1-d sequences")
        if rows.size and (rows.min() < 0 or cols.min() < 0):
            raise ValueError("coordinates must be nonnegative")
        if shape is None:
            if rows.size == 0:
                raise ValueError("cannot infer shape from zero triples")
            shape = (int(rows.max()) + 1, int(cols.max()) + 1)
        n, p = shape
        if rows.size and (rows.max() >= n or cols.max() >= p):
            raise ValueError("coordinate outside the given shape")
        values = np.zeros((n, p))
        mask = np.zeros((n, p), dtype=bool)
        values[rows, cols] = vals
        mask[rows, cols] = True
        return cls(values, mask)


@dataclass(frozen=True)
class SideInfo:
    """Row covariates X (n x n_x) and column covariates Y (p x n_y); either optional.

    Covariates are used as-is; no automatic standardization is applied. An
    absent side makes the corresponding priors covariate-free.
    """

    X: np.ndarray | None = None
    Y: np.ndarray | None = None

    def __post_init__(self):
        for name in ("X", "Y"):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.atleast_2d(np.asarray(a, dtype=float))
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, _readonly(a))

    def validate_against(self, n: int, p: int) -> None:
        if self.X is not None and self.X.shape[0] != n:
            raise ValueError(f"X has {self.X.shape[0]} rows, data has {n}")
        if self.Y is not None and self.Y.shape[0] != p:
            raise ValueError(f"Y has {self.Y.shape[0]} rows, data has {p} columns")


class PrecisionStructure(str, Enum):
    CONSTANT = "constant"
    BY_ROW = "by_row"
    BY_COLUMN = "by_column"


@dataclass(frozen=True)
class PrecisionModel:
    """Residual precisions tau under constant / by-row / by-column structure.

    ``values`` is a scalar for CONSTANT, length-n for BY_ROW, length-p for
    BY_COLUMN. All precisions are strictly positive.
    """

    structure: PrecisionStructure
    values: np.ndarray

    def __post_init__(self):
        structure = PrecisionStructure(self.structure)
        values = np.asarray(self.values, dtype=float)
        if structure is PrecisionStructure.CONSTANT:
            if values.ndim != 0:
                values = values.reshape(())
        elif values.ndim != 1:
            raise ValueError("per-row/per-column precisions must be 1-d")
        if not np.all(values > 0):
            raise ValueError("all precisions must be positive")
        object.__setattr__(self, "structure", structure)
        object.__setattr__(self, "values", _readonly(values))

    def broadcast(self, n: int, p: int) -> np.ndarray:
        """A view of tau broadcastable to (n, p)."""
        if self.structure is PrecisionStructure.CONSTANT:
            return np.broadcast_to(self.values, (n, p))
        if self.structure is PrecisionStructure.BY_ROW:
            if self.values.shape[0] != n:
                raise ValueError("by-row precision length does not match n")
            return np.broadcast_to(self.values[:, None], (n, p))
        if self.values.shape[0] != p:
            raise ValueError("by-column precision length does not match p")
        return np.broadcast_to(self.values[None, :], (n, p))


def expand_precision(pm: PrecisionModel, i: int, j: int) -> float:
    """The scalar precision tau_ij implied by a PrecisionModel at cell (i, j)."""
    if i < 0 or j < 0:
        raise IndexError("indices must be nonnegative")
    if pm.structure is PrecisionStructure.CONSTANT:
        return float(pm.values)
    if pm.structure is PrecisionStructure.BY_ROW:
        return float(pm.values[i])
    return float(pm.values[j])


@dataclass
class FactorState:
    """Per-factor posterior moments of L and F plus their fitted priors.

    ``Lbar``/``Fbar`` hold posterior means, ``Lbar2``/``Fbar2`` second moments
    (never below the squared means). ``priors_l``/``priors_f`` hold the fitted
    prior per factor; ``models_l``/``models_f`` hold covariate prior models
    when side information is in use (None otherwise). ``negkl_l``/``negkl_f``
    cache each factor's summed E_q[log g(beta)/q(beta)] term, one scalar per
    factor and side, maintained by the update loop.
    """

    Lbar: np.ndarray
    Lbar2: np.ndarray
    Fbar: np.ndarray
    Fbar2: np.ndarray
    priors_l: list = field(default_factory=list)
    priors_f: list = field(default_factory=list)
    models_l: list = field(default_factory=list)
    models_f: list = field(default_factory=list)
    negkl_l: list = field(default_factory=list)
    negkl_f: list = field(default_factory=list)

    def __post_init__(self):
        self.Lbar = np.asarray(self.Lbar, dtype=float)
        self.Lbar2 = np.asarray(self.Lbar2, dtype=float)
        self.Fbar = np.asarray(self.Fbar, dtype=float)
        self.Fbar2 = np.asarray(self.Fbar2, dtype=float)
        if self.Lbar.shape != self.Lbar2.shape or self.Fbar.shape != self.Fbar2.shape:
            raise ValueError("moment arrays must agree in shape")
        if self.Lbar.shape[1] != self.Fbar.shape[1]:
            raise ValueError("L and F must have the same number of factors")

    @property
    def K(self) -> int:
        return self.Lbar.shape[1]

    @property
    def n(self) -> int:
        return self.Lbar.shape[0]

    @property
    def p(self) -> int:
        return self.Fbar.shape[0]

    @classmethod
    def empty(cls, n: int, p: int) -> "FactorState":
        return cls(
            Lbar=np.zeros((n, 0)),
            Lbar2=np.zeros((n, 0)),
            Fbar=np.zeros((p, 0)),
            Fbar2=np.zeros((p, 0)),
        )

    def fitted_values(self) -> np.ndarray:
        """The posterior-mean reconstruction Lbar @ Fbar.T."""
        return self.Lbar @ self.Fbar.T

    def drop_factors(self, idx) -> "FactorState":
        """A new state without the factors in ``idx`` (remaining factors renumbered)."""
        keep = [k for k in range(self.K) if k not in set(idx)]
        pick = lambda seq: [seq[k] for k in keep]
        return FactorState(
            Lbar=self.Lbar[:, keep],
            Lbar2=self.Lbar2[:, keep],
            Fbar=self.Fbar[:, keep],
            Fbar2=self.Fbar2[:, keep],
            priors_l=pick(self.priors_l),
            priors_f=pick(self.priors_f),
            models_l=pick(self.models_l),
            models_f=pick(self.models_f),
            negkl_l=pick(self.negkl_l),
            negkl_f=pick(self.negkl_f),
        )


@dataclass(frozen=True)
class NormalMeansInput:
    """Observations for one normal-means problem: beta_hat_i ~ N(beta_i, s_i^2).

    ``s`` entries may be +inf to mark rows carrying no information; such rows
    are skipped by likelihood sums and inherit prior moments as posteriors.
    ``D`` optionally carries one covariate row per observation.
    """

    beta_hat: np.ndarray
    s: np.ndarray
    D: np.ndarray | None = None

    def __post_init__(self):
        beta_hat = np.asarray(self.beta_hat, dtype=float).ravel()
        s = np.asarray(self.s, dtype=float).ravel()
        if s.shape != beta_hat.shape:
            raise ValueError("beta_hat and s must have equal length")
        if np.any(s <= 0) or np.any(np.isnan(s)):
            raise ValueError("s must be strictly positive (inf allowed)")
        if not np.all(np.isfinite(beta_hat[np.isfinite(s)])):
            raise ValueError("beta_hat must be finite wherever s is finite")
        object.__setattr__(self, "beta_hat", _readonly(beta_hat))
        object.__setattr__(self, "s", _readonly(s))
        if self.D is not None:
            D = np.atleast_2d(np.asarray(self.D, dtype=float))
            if D.shape[0] != beta_hat.shape[0]:
                raise ValueError("D must have one row per observation")
            object.__setattr__(self, "D", _readonly(D))

    @property
    def m(self) -> int:
        return self.beta_hat.shape[0]
