"""Synthetic benchmark scenarios for covariate-moderated factorization.

Four generators produce fully observed matrices ``Z = L F^T + noise`` with
homoskedastic noise of precision ``tau``, together with the side information
a model may (or may not) find useful:

- ``sparsity_driven``: covariates control where loadings and factors are
  exactly zero, with the zero fraction of ``L F^T`` calibrated to 90%.
- ``uninformative``: the same sparse factors but with constant zero
  probabilities; the covariates are pure noise.
- ``tiled``: rank-3 cluster memberships determined by a periodic tiling of
  the unit square; row covariates are the 2-d locations.
- ``shifted_tiled``: like ``tiled`` but each row of L is a cyclic
  permutation of (1, 2, 3), so no spike-and-slab prior matches it.

All generators are deterministic functions of the spec (including its seed).
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .types import DataMatrix, SideInfo

__all__ = [
    "SCENARIOS",
    "ScenarioSpec",
    "SimulatedInstance",
    "gen_shifted_tiled",
    "gen_sparsity_driven",
    "gen_tiled_clustering",
    "gen_uninformative",
    "generate",
    "rmse_truth",
    "slab_indicators",
]

#: Number of covariate columns in the sparsity-driven and uninformative
#: scenarios.
N_COVARIATES = 10

#: Side length of one tile in the periodic tiling of the unit square.
TILE_SIZE = 0.25

#: Target zero fraction of L F^T in the sparsity-calibrated scenarios.
SPARSITY_TARGET = 0.90

#: Loading rows of the shifted tiled scenario, indexed by tile label - 1.
SHIFTED_PATTERNS = np.array(
    [[1.0, 2.0, 3.0], [3.0, 1.0, 2.0], [2.0, 3.0, 1.0]]
)


@dataclass(frozen=True)
class ScenarioSpec:
    """Which scenario to generate and at what size.

    Parameters
    ----------
    kind : str
        One of ``"sparsity_driven"``, ``"uninformative"``, ``"tiled"``,
        ``"shifted_tiled"``.
    n, p : int
        Data matrix dimensions.
    K_true : int or None
        Ground-truth rank. Defaults to 2 for the sparsity-calibrated
        scenarios and 3 for the tiled ones (the tiled scenarios only
        support 3).
    tau : float
        Noise precision; the noise standard deviation is ``tau ** -0.5``.
    seed : int
        Seed for the generator; identical specs give identical instances.
    """

    kind: str
    n: int = 1000
    p: int = 200
    K_true: int | None = None
    tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(
                f"unknown scenario {self.kind!r}; expected one of {sorted(SCENARIOS)}"
            )
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.K_true is None:
            in_tiled = self.kind in ("tiled", "shifted_tiled")
            object.__setattr__(self, "K_true", 3 if in_tiled else 2)
        if self.kind in ("tiled", "shifted_tiled") and self.K_true != 3:
            raise ValueError("tiled scenarios have exactly 3 factors")
        if self.K_true < 1:
            raise ValueError("K_true must be positive")


@dataclass
class SimulatedInstance:
    """A generated data set with its ground truth.

    ``Z`` is fully observed; ``side`` carries the scenario's covariates
    (``Y`` is None when only rows have side information); ``L_true`` and
    ``F_true`` are the factors that produced the signal.
    """

    Z: DataMatrix
    side: SideInfo
    L_true: np.ndarray
    F_true: np.ndarray

    def signal(self) -> np.ndarray:
        """The noiseless matrix ``L_true @ F_true.T``."""
        return self.L_true @ self.F_true.T


def slab_indicators(intercept, scores, uniforms) -> np.ndarray:
    """Which entries draw from the slab at a given shared intercept.

    Entry ``(i, k)`` is active when ``uniforms[i, k]`` falls below the slab
    probability ``sigmoid(intercept + scores[i, k])``. Holding ``uniforms``
    fixed couples the patterns across intercepts, making the active set
    monotone in the intercept: ``-inf`` deactivates everything.
    """
    return uniforms < expit(intercept + np.asarray(scores))


def _calibrate_intercept(scores_l, scores_f, u_l, u_f, target, max_steps=100):
    """Bisection on the shared slab intercept to hit a zero fraction.

    Returns the intercept at which the realized zero fraction of the
    product pattern is within 0.005 of ``target``; raises if bisection
    does not get there in ``max_steps`` steps.
    """

    def zero_fraction(c):
        active_l = slab_indicators(c, scores_l, u_l).astype(float)
        active_f = slab_indicators(c, scores_f, u_f).astype(float)
        return float(np.mean(active_l @ active_f.T == 0.0))

    lo, hi = -60.0, 60.0
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        frac = zero_fraction(mid)
        if abs(frac - target) <= 0.005:
            return mid
        if frac > target:
            lo = mid
        else:
            hi = mid
    raise RuntimeError(
        f"sparsity calibration failed to reach {target:.0%} zeros "
        f"in {max_steps} bisection steps"
    )


def _sparse_factors(spec, rng, scores_l, scores_f):
    """Spike-and-slab factors with the product zero fraction calibrated."""
    n, p, K = spec.n, spec.p, spec.K_true
    u_l = rng.uniform(size=(n, K))
    u_f = rng.uniform(size=(p, K))
    slab_l = rng.normal(size=(n, K))
    slab_f = rng.normal(size=(p, K))
    c = _calibrate_intercept(scores_l, scores_f, u_l, u_f, SPARSITY_TARGET)
    L = slab_l * slab_indicators(c, scores_l, u_l)
    F = slab_f * slab_indicators(c, scores_f, u_f)
    return L, F


def _assemble(spec, rng, side, L, F) -> SimulatedInstance:
    noise = rng.normal(0.0, spec.tau**-0.5, (spec.n, spec.p))
    Z = DataMatrix.from_dense(L @ F.T + noise)
    return SimulatedInstance(Z=Z, side=side, L_true=L, F_true=F)


def gen_sparsity_driven(spec: ScenarioSpec) -> SimulatedInstance:
    """Covariates drive where the factors are exactly zero.

    Loadings follow ``pi_ik delta_0 + (1 - pi_ik) N(0, 1)`` where the slab
    probability ``1 - pi_ik`` is a logistic function of ``theta_k' x_i``
    plus a shared intercept calibrated so about 90% of the entries of
    ``L F^T`` are zero; the factors are analogous in the column covariates.
    """
    _require_kind(spec, "sparsity_driven")
    rng = np.random.default_rng(spec.seed)
    X = rng.normal(size=(spec.n, N_COVARIATES))
    Y = rng.normal(size=(spec.p, N_COVARIATES))
    theta = rng.normal(size=(spec.K_true, N_COVARIATES))
    omega = rng.normal(size=(spec.K_true, N_COVARIATES))
    L, F = _sparse_factors(spec, rng, X @ theta.T, Y @ omega.T)
    return _assemble(spec, rng, SideInfo(X=X, Y=Y), L, F)


def gen_uninformative(spec: ScenarioSpec) -> SimulatedInstance:
    """Sparse factors with constant zero probability; covariates are noise."""
    _require_kind(spec, "uninformative")
    rng = np.random.default_rng(spec.seed)
    X = rng.normal(size=(spec.n, N_COVARIATES))
    Y = rng.normal(size=(spec.p, N_COVARIATES))
    L, F = _sparse_factors(
        spec,
        rng,
        np.zeros((spec.n, spec.K_true)),
        np.zeros((spec.p, spec.K_true)),
    )
    return _assemble(spec, rng, SideInfo(X=X, Y=Y), L, F)


def _tile_labels(locations: np.ndarray) -> np.ndarray:
    """Tile labels in {1, 2, 3} on a periodic grid over the unit square.

    The square is cut into tiles of side ``TILE_SIZE``; labels cycle 1, 2, 3
    in row-major order across the grid, so every label covers several
    disconnected tiles.
    """
    cells = np.clip((locations // TILE_SIZE).astype(int), 0, int(1 / TILE_SIZE) - 1)
    per_row = int(1 / TILE_SIZE)
    return (per_row * cells[:, 0] + cells[:, 1]) % 3 + 1


def _tiled_parts(spec, rng):
    locations = rng.uniform(size=(spec.n, 2))
    labels = _tile_labels(locations)
    F = rng.normal(size=(spec.p, 3)) * np.where(
        rng.integers(0, 2, (spec.p, 3)) == 0, 1.0, 2.0
    )
    return locations, labels, F


def gen_tiled_clustering(spec: ScenarioSpec) -> SimulatedInstance:
    """Rank-3 memberships from a periodic tiling; locations are covariates.

    Each row's 2-d location (uniform on the unit square) determines a tile
    label in {1, 2, 3}, and ``l_ik = 1`` exactly when row ``i``'s label is
    ``k``. ``F`` is drawn from an equal-weight scale mixture of ``N(0, 1)``
    and ``N(0, 4)``, independent of the tiling.
    """
    _require_kind(spec, "tiled")
    rng = np.random.default_rng(spec.seed)
    locations, labels, F = _tiled_parts(spec, rng)
    L = (labels[:, None] == np.arange(1, 4)[None, :]).astype(float)
    return _assemble(spec, rng, SideInfo(X=locations), L, F)


def gen_shifted_tiled(spec: ScenarioSpec) -> SimulatedInstance:
    """Tiled clustering with loading rows shifted off the spike.

    Row ``i`` of ``L`` is (1, 2, 3), (3, 1, 2) or (2, 3, 1) according to its
    tile label, so every loading is nonzero and no spike-and-slab prior
    family matches the truth.
    """
    _require_kind(spec, "shifted_tiled")
    rng = np.random.default_rng(spec.seed)
    locations, labels, F = _tiled_parts(spec, rng)
    L = SHIFTED_PATTERNS[labels - 1]
    return _assemble(spec, rng, SideInfo(X=locations), L, F)


def _require_kind(spec, kind):
    if spec.kind != kind:
        raise ValueError(f"spec.kind is {spec.kind!r}, expected {kind!r}")


SCENARIOS = {
    "sparsity_driven": gen_sparsity_driven,
    "uninformative": gen_uninformative,
    "tiled": gen_tiled_clustering,
    "shifted_tiled": gen_shifted_tiled,
}


def generate(spec: ScenarioSpec) -> SimulatedInstance:
    """Generate the instance described by ``spec``."""
    return SCENARIOS[spec.kind](spec)


def rmse_truth(instance: SimulatedInstance, result) -> float:
    """Root mean squared error between the fitted and true factorizations.

    Compares ``Lbar @ Fbar.T`` from a fit result against the instance's
    noiseless signal over all cells.
    """
    diff = result.state.fitted_values() - instance.signal()
    return float(np.sqrt(np.mean(diff * diff)))
