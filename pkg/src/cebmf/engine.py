"""Coordinate-ascent fitting of the factorization model.

The driver alternates residual-precision updates with per-factor updates.
A factor update reduces to two normal-means problems (one per side) built
from precision-weighted least-squares statistics of the expected residuals;
their fitted priors and posterior moments feed the evidence lower bound.
Factors are seeded greedily from rank-1 power-iteration fits and pruned
when their posterior mass collapses to zero.

All randomness (power-iteration starts, prior-model initialization, and
minibatch shuffling) flows through a single generator seeded from the
configuration, so identical inputs produce bit-identical results.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ebnm import (
    MixturePrior,
    NormalSlab,
    nm_fit_constant_prior,
    nm_loglik,
    nm_neg_kl,
    nm_posterior,
)
from .priors import (
    COVARIATE_FAMILIES,
    covariate_posterior,
    default_components,
    fit_covariate_prior,
    make_prior_model,
)
from .types import (
    DataMatrix,
    FactorState,
    NormalMeansInput,
    PrecisionModel,
    PrecisionStructure,
    SideInfo,
)

__all__ = [
    "FitConfig",
    "FitResult",
    "CONSTANT_FAMILIES",
    "expected_residuals",
    "factor_stats_l",
    "factor_stats_f",
    "update_factor",
    "update_tau",
    "expected_loglik",
    "compute_elbo",
    "greedy_init",
    "prune_factors",
    "fit",
    "impute",
]

_LOG2PI = float(np.log(2.0 * np.pi))

TAU_MAX = 1e12

CONSTANT_FAMILIES = ("point_normal", "normal_mix", "exp_mix")

# what a covariate family degrades to when its side has no covariates
_COVARIATE_FALLBACK = {
    "logistic": "point_normal",
    "softmax_normal": "normal_mix",
    "mlp_normal": "normal_mix",
    "softmax_exp": "exp_mix",
    "mlp_exp": "exp_mix",
}


@dataclass(frozen=True)
class FitConfig:
    """Fitting configuration.

    Parameters
    ----------
    K_max : maximum number of factors attempted by the greedy initializer
    max_sweeps : full update sweeps after initialization
    elbo_rel_tol : stop when one sweep improves the ELBO by less than
        ``elbo_rel_tol * max(1, |ELBO|)``
    precision : residual precision structure (constant / by_row / by_column)
    prior_family_l, prior_family_f : prior family per side; one of
        ``point_normal``, ``normal_mix``, ``exp_mix`` or a covariate family
        (``logistic``, ``softmax_normal``, ``softmax_exp``, ``mlp_normal``,
        ``mlp_exp``). Covariate families fall back to their covariate-free
        counterpart when the matching side carries no covariates.
    prune_threshold : drop factor k when max(l2_k) * max(f2_k) falls below
    seed : seed for every random draw made during the fit
    elbo_per_update : record the ELBO after every individual coordinate
        update (slower; used by monitoring and tests)
    """

    K_max: int = 10
    max_sweeps: int = 200
    elbo_rel_tol: float = 1e-6
    precision: PrecisionStructure = PrecisionStructure.CONSTANT
    prior_family_l: str = "normal_mix"
    prior_family_f: str = "normal_mix"
    prune_threshold: float = 1e-10
    seed: int = 0
    elbo_per_update: bool = False

    def __post_init__(self):
        if self.K_max < 1:
            raise ValueError("K_max must be at least 1")
        if self.max_sweeps < 0:
            raise ValueError("max_sweeps must be nonnegative")
        if self.elbo_rel_tol <= 0 or self.prune_threshold <= 0:
            raise ValueError("tolerances must be positive")
        object.__setattr__(self, "precision", PrecisionStructure(self.precision))
        for fam in (self.prior_family_l, self.prior_family_f):
            if fam not in CONSTANT_FAMILIES and fam not in COVARIATE_FAMILIES:
                raise ValueError(f"unknown prior family {fam!r}")


@dataclass
class FitResult:
    """Everything a fit produces.

    ``elbo_trace`` holds the ELBO at initialization followed by one value per
    sweep. ``update_trace`` is filled only when the fit ran with
    ``elbo_per_update`` and then holds the ELBO after every coordinate
    update. ``pruned`` lists factor indices removed at each pruning step (as
    numbered when removed). ``sweep_seconds`` carries wall-clock timings; it
    is excluded from equality so results compare on content alone.
    """

    state: FactorState
    precision: PrecisionModel
    elbo_trace: np.ndarray
    pruned: list
    converged: bool
    update_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sweep_seconds: list = field(default_factory=list, compare=False)

    @property
    def elbo(self) -> float:
        return float(self.elbo_trace[-1])


def _informative_design(D) -> bool:
    """Whether a covariate matrix varies across rows.

    A design whose rows are all identical (or absent) cannot move the
    mixture weights away from a shared vector, so the prior subproblem is
    exactly the constant one; resolving it to the constant family solves
    that case directly instead of through a degenerate regression.
    """
    return D is not None and D.shape[0] > 1 and not np.all(D == D[:1])


def _resolve_family(requested: str, has_covariates: bool) -> str:
    if requested in CONSTANT_FAMILIES:
        return requested
    if requested in COVARIATE_FAMILIES:
        return requested if has_covariates else _COVARIATE_FALLBACK[requested]
    raise ValueError(f"unknown prior family {requested!r}")


def _masked_precision(Z: DataMatrix, tau: PrecisionModel) -> np.ndarray:
    """Per-entry precision with zeros at unobserved entries."""
    return tau.broadcast(Z.n, Z.p) * Z.mask


def expected_residuals(Z: DataMatrix, state: FactorState) -> np.ndarray:
    """Expected residuals Z - Lbar @ Fbar.T, zero at unobserved entries."""
    if state.n != Z.n or state.p != Z.p:
        raise ValueError("state dimensions do not match the data")
    if state.K == 0:
        return Z.values.copy()
    return (Z.values - state.Lbar @ state.Fbar.T) * Z.mask


def factor_stats_l(rk, fbar, fbar2, w):
    """Row-wise least-squares statistics for one factor's loadings.

    Parameters
    ----------
    rk : residuals excluding the factor (entries at unobserved cells are
        ignored because ``w`` is zero there)
    fbar, fbar2 : the factor's column first and second moments
    w : per-entry precision, zero at unobserved entries

    Returns
    -------
    (lhat, s): the normal-means observations ``lhat_i`` and standard errors
    ``s_i``; rows whose precision-weighted information is zero (or so small
    that the standard error would exceed 1e15, where it stops being
    distinguishable from none) get (0, +inf).
    """
    denom = w @ fbar2
    num = (w * rk) @ fbar
    pos = denom > 1e-30
    s = np.full(denom.shape, np.inf)
    lhat = np.zeros(denom.shape)
    s[pos] = denom[pos] ** -0.5
    lhat[pos] = num[pos] / denom[pos]
    return lhat, s


def factor_stats_f(rk, lbar, lbar2, w):
    """Column-wise analogue of :func:`factor_stats_l`."""
    return factor_stats_l(rk.T, lbar, lbar2, w.T)


def _spike_prior() -> MixturePrior:
    return MixturePrior(pi0=1.0, slabs=(NormalSlab(0.0, 1.0),), weights=(0.0,))


def _collapse_side(state: FactorState, k: int, which: str) -> None:
    if which == "l":
        state.Lbar[:, k] = 0.0
        state.Lbar2[:, k] = 0.0
        state.priors_l[k] = _spike_prior()
        state.models_l[k] = None
        state.negkl_l[k] = 0.0
    else:
        state.Fbar[:, k] = 0.0
        state.Fbar2[:, k] = 0.0
        state.priors_f[k] = _spike_prior()
        state.models_f[k] = None
        state.negkl_f[k] = 0.0


def _refresh_side(
    state: FactorState,
    k: int,
    which: str,
    bhat: np.ndarray,
    s: np.ndarray,
    covariates: np.ndarray | None,
    family: str,
    rng: np.random.Generator | None,
) -> None:
    """Fit the side's prior to (bhat, s), then set exact posterior moments.

    Refits warm-start from the side's previous prior and are kept only when
    they do not lower the marginal log likelihood, so each call can only
    raise the ELBO contribution of this coordinate block.
    """
    models = state.models_l if which == "l" else state.models_f
    priors = state.priors_l if which == "l" else state.priors_f
    negkls = state.negkl_l if which == "l" else state.negkl_f

    if family in COVARIATE_FAMILIES and covariates is not None:
        nm = NormalMeansInput(beta_hat=bhat, s=s, D=covariates)
        model = models[k]
        if model is None or model.family != family:
            finite = np.isfinite(s)
            comps = default_components(family, bhat[finite], s[finite])
            w0 = np.full(1 + len(comps), 0.1 / len(comps))
            w0[0] = 0.9
            model = make_prior_model(
                family, covariates.shape[1], comps, rng=rng, init_weights=w0
            )
        model = fit_covariate_prior(model, nm, rng=rng)
        loglik, moments = covariate_posterior(model, nm)
        models[k] = model
        priors[k] = model
    else:
        nm = NormalMeansInput(beta_hat=bhat, s=s)
        old = priors[k] if isinstance(priors[k], MixturePrior) else None
        init = old if (old is not None and old.pi0 < 1.0) else None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            prior = nm_fit_constant_prior(nm, family, init=init)
        loglik = nm_loglik(bhat, s, prior)
        if old is not None:
            old_loglik = nm_loglik(bhat, s, old)
            if float(np.sum(old_loglik)) > float(np.sum(loglik)):
                prior, loglik = old, old_loglik
        moments = nm_posterior(bhat, s, prior)
        models[k] = None
        priors[k] = prior

    if which == "l":
        state.Lbar[:, k] = moments.mean
        state.Lbar2[:, k] = moments.second
    else:
        state.Fbar[:, k] = moments.mean
        state.Fbar2[:, k] = moments.second
    negkls[k] = float(np.sum(nm_neg_kl(bhat, s, loglik, moments)))


def update_factor(
    k: int,
    Z: DataMatrix,
    state: FactorState,
    tau: PrecisionModel,
    side: SideInfo | None = None,
    families=("normal_mix", "normal_mix"),
    rbar: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    w: np.ndarray | None = None,
) -> np.ndarray:
    """One coordinate update of factor ``k`` (loadings side, then factors side).

    Mutates ``state`` in place and returns the refreshed expected residuals.
    ``rbar`` may carry the current expected residuals to avoid recomputing
    them; ``w`` may carry the masked per-entry precision. A numerical failure
    inside either normal-means subproblem leaves the factor unchanged and
    emits a warning.
    """
    if not 0 <= k < state.K:
        raise IndexError(f"factor {k} out of range for K={state.K}")
    if rbar is None:
        rbar = expected_residuals(Z, state)
    if w is None:
        w = _masked_precision(Z, tau)
    X = side.X if side is not None else None
    Y = side.Y if side is not None else None
    family_l = _resolve_family(families[0], _informative_design(X))
    family_f = _resolve_family(families[1], _informative_design(Y))

    # residuals with factor k added back; unobserved cells hold garbage that
    # every downstream sum ignores through w
    rk = state.Lbar[:, k][:, None] * state.Fbar[:, k][None, :]
    rk += rbar

    if not np.any(state.Fbar2[:, k] > 0):
        _collapse_side(state, k, "l")
        _collapse_side(state, k, "f")
        return rk * Z.mask

    snapshot = (
        state.Lbar[:, k].copy(),
        state.Lbar2[:, k].copy(),
        state.Fbar[:, k].copy(),
        state.Fbar2[:, k].copy(),
        state.priors_l[k],
        state.priors_f[k],
        state.models_l[k],
        state.models_f[k],
        state.negkl_l[k],
        state.negkl_f[k],
    )
    try:
        lhat, s_l = factor_stats_l(rk, state.Fbar[:, k], state.Fbar2[:, k], w)
        _refresh_side(state, k, "l", lhat, s_l, X, family_l, rng)
        if not np.any(state.Lbar2[:, k] > 0):
            _collapse_side(state, k, "f")
            return rk * Z.mask
        fhat, s_f = factor_stats_f(rk, state.Lbar[:, k], state.Lbar2[:, k], w)
        _refresh_side(state, k, "f", fhat, s_f, Y, family_f, rng)
    except FloatingPointError as exc:
        (
            state.Lbar[:, k],
            state.Lbar2[:, k],
            state.Fbar[:, k],
            state.Fbar2[:, k],
            state.priors_l[k],
            state.priors_f[k],
            state.models_l[k],
            state.models_f[k],
            state.negkl_l[k],
            state.negkl_f[k],
        ) = snapshot
        warnings.warn(f"factor {k} update failed and was left unchanged: {exc}")
        return rbar

    rk -= state.Lbar[:, k][:, None] * state.Fbar[:, k][None, :]
    rk *= Z.mask
    return rk


def _expected_squared_residuals(
    Z: DataMatrix, state: FactorState, rbar: np.ndarray | None = None
) -> np.ndarray:
    """Per-entry posterior expectation of the squared residual (zero when masked)."""
    if rbar is None:
        rbar = expected_residuals(Z, state)
    r2 = rbar * rbar
    if state.K:
        r2 += (state.Lbar2 @ state.Fbar2.T) * Z.mask
        r2 -= ((state.Lbar * state.Lbar) @ (state.Fbar * state.Fbar).T) * Z.mask
        np.clip(r2, 0.0, None, out=r2)
    return r2


def update_tau(
    Z: DataMatrix,
    state: FactorState,
    structure: PrecisionStructure = PrecisionStructure.CONSTANT,
    rbar: np.ndarray | None = None,
) -> PrecisionModel:
    """Maximum-ELBO residual precisions given the current moments.

    Each precision is the observed-entry count divided by the summed
    expected squared residuals over its block (everything, one row, or one
    column), capped at ``TAU_MAX`` when the residuals vanish.
    """
    structure = PrecisionStructure(structure)
    r2 = _expected_squared_residuals(Z, state, rbar)
    if structure is PrecisionStructure.CONSTANT:
        count = float(Z.n_observed)
        total = float(r2.sum())
        value = min(count / total, TAU_MAX) if total > 0 else TAU_MAX
        return PrecisionModel(structure, np.asarray(value))
    axis = 1 if structure is PrecisionStructure.BY_ROW else 0
    counts = Z.mask.sum(axis=axis).astype(float)
    if np.any(counts == 0):
        label = "row" if axis == 1 else "column"
        raise ValueError(f"every {label} needs at least one observed entry")
    sums = r2.sum(axis=axis)
    with np.errstate(divide="ignore"):
        values = np.where(sums > 0, counts / np.where(sums > 0, sums, 1.0), np.inf)
    return PrecisionModel(structure, np.minimum(values, TAU_MAX))


def expected_loglik(
    Z: DataMatrix,
    state: FactorState,
    tau: PrecisionModel,
    rbar: np.ndarray | None = None,
) -> float:
    """E_q[log p(Z | L, F, tau)] over the observed entries."""
    r2 = _expected_squared_residuals(Z, state, rbar)
    if tau.structure is PrecisionStructure.CONSTANT:
        t = float(tau.values)
        count = float(Z.n_observed)
        return count * (-0.5 * _LOG2PI + 0.5 * np.log(t)) - 0.5 * t * float(r2.sum())
    axis = 1 if tau.structure is PrecisionStructure.BY_ROW else 0
    counts = Z.mask.sum(axis=axis).astype(float)
    sums = r2.sum(axis=axis)
    per = counts * (-0.5 * _LOG2PI + 0.5 * np.log(tau.values)) - 0.5 * tau.values * sums
    return float(per[counts > 0].sum())


def compute_elbo(
    Z: DataMatrix,
    state: FactorState,
    tau: PrecisionModel,
    side: SideInfo | None = None,
    rbar: np.ndarray | None = None,
) -> float:
    """The evidence lower bound at the current state.

    The likelihood term integrates the factorized posterior analytically;
    each factor adds its cached prior-vs-posterior terms, one per side.
    """
    value = expected_loglik(Z, state, tau, rbar)
    value += float(np.sum(state.negkl_l)) + float(np.sum(state.negkl_f))
    if not np.isfinite(value):
        raise FloatingPointError(
            f"ELBO is not finite (likelihood term plus {state.K} factor terms)"
        )
    return value


def _power_rank1(rbar: np.ndarray, rng: np.random.Generator, iters: int = 30):
    """Best-effort rank-1 fit (l, f) of ``rbar`` by power iteration, or None."""
    if not np.any(rbar):
        return None
    n, p = rbar.shape
    v = rng.standard_normal(p)
    v /= np.linalg.norm(v)
    u = np.zeros(n)
    for _ in range(iters):
        u = rbar @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            return None
        u /= nu
        v = rbar.T @ u
        nv = np.linalg.norm(v)
        if nv == 0:
            return None
        v /= nv
    sigma = float(u @ (rbar @ v))
    if sigma <= 0:
        return None
    if u.sum() < 0:
        u, v = -u, -v
    root = np.sqrt(sigma)
    return u * root, v * root


def _append_factor(state: FactorState, l: np.ndarray, f: np.ndarray) -> None:
    state.Lbar = np.column_stack([state.Lbar, l])
    state.Lbar2 = np.column_stack([state.Lbar2, l * l])
    state.Fbar = np.column_stack([state.Fbar, f])
    state.Fbar2 = np.column_stack([state.Fbar2, f * f])
    for seq, value in (
        (state.priors_l, None),
        (state.priors_f, None),
        (state.models_l, None),
        (state.models_f, None),
        (state.negkl_l, 0.0),
        (state.negkl_f, 0.0),
    ):
        seq.append(value)


def greedy_init(
    Z: DataMatrix,
    config: FitConfig,
    side: SideInfo | None = None,
    rng: np.random.Generator | None = None,
) -> FactorState:
    """Add factors one at a time until one collapses or K_max is reached.

    Each new factor starts from a rank-1 power-iteration fit to the current
    expected residuals (missing entries contribute zero during this fit
    only), initializes its posterior at that point estimate, and is refined
    by two single-factor updates under a freshly updated precision.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    side_x = side.X if side is not None else None
    side_y = side.Y if side is not None else None
    families = (
        _resolve_family(config.prior_family_l, _informative_design(side_x)),
        _resolve_family(config.prior_family_f, _informative_design(side_y)),
    )
    state = FactorState.empty(Z.n, Z.p)
    rbar = Z.values.copy()
    for k in range(config.K_max):
        pair = _power_rank1(rbar, rng)
        if pair is None:
            break
        l, f = pair
        _append_factor(state, l, f)
        rbar = (rbar - np.outer(l, f)) * Z.mask
        tau = update_tau(Z, state, config.precision, rbar=rbar)
        w = _masked_precision(Z, tau)
        for _ in range(2):
            rbar = update_factor(
                k, Z, state, tau, side, families, rbar=rbar, rng=rng, w=w
            )
        if (
            float(state.Lbar2[:, k].max(initial=0.0))
            * float(state.Fbar2[:, k].max(initial=0.0))
            < config.prune_threshold
        ):
            rbar += (state.Lbar[:, k][:, None] * state.Fbar[:, k][None, :]) * Z.mask
            state = state.drop_factors([k])
            break
    return state


def prune_factors(state: FactorState, threshold: float) -> tuple:
    """Drop factors whose moment product fell below ``threshold``.

    Returns (new_state, dropped_indices); indices refer to the numbering
    before removal.
    """
    if state.K == 0:
        return state, []
    product = state.Lbar2.max(axis=0) * state.Fbar2.max(axis=0)
    drop = [k for k in range(state.K) if product[k] < threshold]
    if not drop:
        return state, []
    return state.drop_factors(drop), drop


def fit(
    Z: DataMatrix,
    side: SideInfo | None = None,
    config: FitConfig | None = None,
) -> FitResult:
    """Fit the factorization by greedy initialization plus update sweeps.

    Each sweep refreshes the residual precisions, updates every factor in
    ascending order, and prunes collapsed factors; sweeps stop when the ELBO
    gain drops below the configured relative tolerance or ``max_sweeps`` is
    reached. Identical inputs and seed give bit-identical results.
    """
    if isinstance(Z, np.ndarray):
        Z = DataMatrix.from_dense(Z)
    config = FitConfig() if config is None else config
    if side is not None:
        side.validate_against(Z.n, Z.p)
    rng = np.random.default_rng(config.seed)
    families = (
        _resolve_family(config.prior_family_l,
                        _informative_design(side.X if side is not None else None)),
        _resolve_family(config.prior_family_f,
                        _informative_design(side.Y if side is not None else None)),
    )

    state = greedy_init(Z, config, side, rng)
    tau = update_tau(Z, state, config.precision)
    rbar = expected_residuals(Z, state)
    elbo = compute_elbo(Z, state, tau, side, rbar=rbar)
    trace = [elbo]
    update_trace = [elbo] if config.elbo_per_update else []
    pruned: list = []
    sweep_seconds: list = []
    converged = False

    for _ in range(config.max_sweeps):
        t0 = time.perf_counter()
        tau = update_tau(Z, state, config.precision, rbar=rbar)
        if config.elbo_per_update:
            update_trace.append(compute_elbo(Z, state, tau, side, rbar=rbar))
        w = _masked_precision(Z, tau)
        for k in range(state.K):
            rbar = update_factor(
                k, Z, state, tau, side, families, rbar=rbar, rng=rng, w=w
            )
            if config.elbo_per_update:
                update_trace.append(compute_elbo(Z, state, tau, side, rbar=rbar))
        new_state, dropped = prune_factors(state, config.prune_threshold)
        if dropped:
            back = state.Lbar[:, dropped] @ state.Fbar[:, dropped].T
            rbar = (rbar + back) * Z.mask
            state = new_state
            pruned.extend(dropped)
        new_elbo = compute_elbo(Z, state, tau, side, rbar=rbar)
        sweep_seconds.append(time.perf_counter() - t0)
        trace.append(new_elbo)
        if new_elbo - elbo <= config.elbo_rel_tol * max(1.0, abs(new_elbo)):
            elbo = new_elbo
            converged = True
            break
        elbo = new_elbo

    return FitResult(
        state=state,
        precision=tau,
        elbo_trace=np.asarray(trace),
        pruned=pruned,
        converged=converged,
        update_trace=np.asarray(update_trace),
        sweep_seconds=sweep_seconds,
    )


def impute(result: FitResult, mask=None) -> np.ndarray:
    """Posterior-mean predictions Lbar @ Fbar.T.

    With ``mask`` None the full matrix is returned; a boolean mask instead
    selects cells, returned as a 1-d array in row-major order.
    """
    fitted = result.state.fitted_values()
    if mask is None:
        return fitted
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != fitted.shape:
        raise ValueError("target mask shape does not match the fitted matrix")
    return fitted[mask]
