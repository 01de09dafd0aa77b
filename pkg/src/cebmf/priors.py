"""Covariate-moderated prior families.

Maps a covariate row x to a spike-and-slab MixturePrior whose weights are a
parametric function of x (logistic for a single slab, multinomial softmax
regression, or a small MLP), and fits the parameters theta by EM on the
normal-means marginal likelihood: responsibilities in the E-step, a weighted
classification fit in the M-step.

The slab component grid is fixed at model creation and never changes across
fitting calls, so repeated calls optimize over one fixed prior family. Every
fitting call is guarded: a parameter update is kept only if it does not lower
the marginal log likelihood of the data it was fit to, which makes the
surrounding coordinate ascent monotone even with penalized or stochastic
M-steps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .ebnm import (
    ExponentialSlab,
    MixturePrior,
    NormalSlab,
    PosteriorMoments,
    _em_weights,
    _responsibilities,
    component_log_marginals,
    default_scale_grid,
    weighted_mixture_loglik,
    weighted_mixture_posterior,
)
from .types import NormalMeansInput

__all__ = [
    "CovariatePriorModel",
    "SoftmaxPriorModel",
    "MlpPriorModel",
    "make_prior_model",
    "default_components",
    "prior_at",
    "fit_covariate_prior",
    "mlp_forward",
    "softmax_mstep_objective",
    "mlp_mstep_objective",
    "COVARIATE_FAMILIES",
]

# family name -> (slab kind, weight model)
COVARIATE_FAMILIES = {
    "logistic": ("normal", "softmax"),
    "softmax_normal": ("normal", "softmax"),
    "softmax_exp": ("exp", "softmax"),
    "mlp_normal": ("normal", "mlp"),
    "mlp_exp": ("exp", "mlp"),
}

DEFAULT_L2_SOFTMAX = 3.0
DEFAULT_L2_MLP = 1e-3
DEFAULT_OUTER_ITERS = 3
DEFAULT_MLP_HIDDEN = 64
DEFAULT_MLP_EPOCHS = 50
DEFAULT_MLP_BATCH = 256
DEFAULT_MLP_LR = 1e-3


def _with_intercept(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.concatenate([np.ones((X.shape[0], 1)), X], axis=1)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    return scores - logsumexp(scores, axis=1, keepdims=True)


@dataclass(frozen=True)
class CovariatePriorModel:
    """Base: a fixed slab grid plus parameters mapping covariates to weights."""

    family: str
    slabs: tuple

    @property
    def n_components(self) -> int:
        return 1 + len(self.slabs)

    def log_weights_at(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def weights_at(self, X: np.ndarray) -> np.ndarray:
        return np.exp(self.log_weights_at(X))

    def describe(self) -> dict:
        comps = []
        for sl in self.slabs:
            if isinstance(sl, NormalSlab):
                comps.append({"kind": "normal", "mean": sl.mean, "variance": sl.variance})
            else:
                comps.append({"kind": "exponential", "scale": sl.scale})
        return {"family": self.family, "components": comps}


@dataclass(frozen=True)
class SoftmaxPriorModel(CovariatePriorModel):
    """Weights = softmax over (spike, slabs) of linear scores.

    The spike's score is pinned at 0 (identifiable multinomial-regression
    parameterization), so ``theta`` has one column per slab and one row per
    covariate plus an intercept row. theta = 0 emits uniform weights; with a
    single slab this is exactly logistic regression on the slab probability.
    """

    theta: np.ndarray = None

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 2 or theta.shape[1] != len(self.slabs):
            raise ValueError("theta must be (d+1) x n_slabs")
        object.__setattr__(self, "theta", theta)

    @property
    def covariate_dim(self) -> int:
        return self.theta.shape[0] - 1

    def scores_at(self, X: np.ndarray) -> np.ndarray:
        X1 = _with_intercept(X)
        if X1.shape[1] != self.theta.shape[0]:
            raise ValueError(
                f"covariate dimension {X1.shape[1] - 1} does not match model "
                f"({self.theta.shape[0] - 1})"
            )
        slab_scores = X1 @ self.theta
        return np.concatenate([np.zeros((X1.shape[0], 1)), slab_scores], axis=1)

    def log_weights_at(self, X: np.ndarray) -> np.ndarray:
        return _log_softmax(self.scores_at(X))

    def describe(self) -> dict:
        out = super().describe()
        out["theta"] = self.theta.tolist()
        return out


@dataclass(frozen=True)
class MlpPriorModel(CovariatePriorModel):
    """Weights = softmax of a one-hidden-layer ReLU network's scores.

    ``params`` holds W1 (d x H), b1 (H,), W2 (H x C), b2 (C,) with C = number
    of mixture components including the spike. An all-zero network emits
    uniform weights.
    """

    params: dict = None

    def __post_init__(self):
        p = {k: np.asarray(v, dtype=float) for k, v in self.params.items()}
        if p["W2"].shape[1] != self.n_components or p["b2"].shape != (self.n_components,):
            raise ValueError("output layer must emit one score per component")
        if p["W1"].shape[1] != p["W2"].shape[0] or p["b1"].shape != (p["W1"].shape[1],):
            raise ValueError("hidden layer shapes are inconsistent")
        object.__setattr__(self, "params", p)

    @property
    def covariate_dim(self) -> int:
        return self.params["W1"].shape[0]

    def log_weights_at(self, X: np.ndarray) -> np.ndarray:
        return _log_softmax(mlp_forward(self.params, X))

    def describe(self) -> dict:
        out = super().describe()
        out["theta"] = {k: v.tolist() for k, v in self.params.items()}
        return out


def mlp_forward(params: dict, x) -> np.ndarray:
    """Deterministic forward pass: scores = relu(x W1 + b1) W2 + b2.

    Accepts a single covariate row or an (n, d) matrix; returns matching
    (C,) or (n, C) raw scores (the caller applies softmax).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != params["W1"].shape[0]:
        raise ValueError(
            f"covariate dimension {X.shape[1]} does not match model "
            f"({params['W1'].shape[0]})"
        )
    hidden = np.maximum(X @ params["W1"] + params["b1"], 0.0)
    scores = hidden @ params["W2"] + params["b2"]
    return scores[0] if single else scores


def default_components(family: str, beta_hat, s) -> tuple:
    """The fixed slab grid a covariate family uses, derived from the data once."""
    kind = COVARIATE_FAMILIES[family][0]
    beta_hat = np.asarray(beta_hat, dtype=float)
    s = np.asarray(s, dtype=float)
    if family == "logistic":
        finite = np.isfinite(s)
        var = float(np.mean(np.maximum(beta_hat[finite] ** 2 - s[finite] ** 2, 0.0)))
        var = max(var, float(np.min(s[finite]) ** 2 / 100.0))
        return (NormalSlab(0.0, var),)
    grid = default_scale_grid(beta_hat, s)
    if kind == "normal":
        return tuple(NormalSlab(0.0, float(sd) ** 2) for sd in grid)
    return tuple(ExponentialSlab(float(sc)) for sc in grid)


def make_prior_model(
    family: str,
    covariate_dim: int,
    slabs,
    rng: np.random.Generator | None = None,
    hidden: int = DEFAULT_MLP_HIDDEN,
    init_weights=None,
) -> CovariatePriorModel:
    """A freshly initialized covariate prior model.

    Without ``init_weights``, every covariate row maps to uniform mixture
    weights: softmax models start at theta = 0; MLP models draw the hidden
    layer from a scaled normal (symmetry breaking) but zero the output layer
    (pass ``rng`` for reproducibility). ``init_weights`` (a length-C
    probability vector over spike+slabs) instead starts every row at those
    weights via the intercept/output bias, leaving the covariate response at
    zero.
    """
    if family not in COVARIATE_FAMILIES:
        raise ValueError(f"unknown covariate prior family {family!r}")
    slabs = tuple(slabs)
    kind, weight_model = COVARIATE_FAMILIES[family]
    C = 1 + len(slabs)
    bias = np.zeros(C)
    if init_weights is not None:
        w0 = np.clip(np.asarray(init_weights, dtype=float), 1e-12, None)
        if w0.shape != (C,):
            raise ValueError("init_weights must have one entry per component")
        bias = np.log(w0 / w0.sum())
    if weight_model == "softmax":
        theta = np.zeros((covariate_dim + 1, len(slabs)))
        theta[0, :] = bias[1:] - bias[0]
        return SoftmaxPriorModel(family=family, slabs=slabs, theta=theta)
    rng = np.random.default_rng(0) if rng is None else rng
    params = {
        "W1": rng.normal(0.0, np.sqrt(2.0 / max(covariate_dim, 1)), (covariate_dim, hidden)),
        "b1": np.zeros(hidden),
        "W2": np.zeros((hidden, C)),
        "b2": bias.copy(),
    }
    return MlpPriorModel(family=family, slabs=slabs, params=params)


def prior_at(model: CovariatePriorModel, x) -> MixturePrior:
    """The MixturePrior a model emits for one covariate row."""
    w = model.weights_at(np.atleast_2d(x))[0]
    w = w / w.sum()
    return MixturePrior(pi0=float(w[0]), slabs=model.slabs, weights=w[1:])


def covariate_loglik(model: CovariatePriorModel, nm_input: NormalMeansInput) -> float:
    """Total marginal log likelihood of the data under the model's per-row priors."""
    bh, s = nm_input.beta_hat, nm_input.s
    finite = np.isfinite(s)
    if not np.any(finite):
        return 0.0
    log_w = model.log_weights_at(nm_input.D[finite])
    A = component_log_marginals(model.slabs, bh[finite], s[finite])
    return float(weighted_mixture_loglik(A, log_w).sum())


def covariate_posterior(model: CovariatePriorModel, nm_input: NormalMeansInput):
    """Per-entry (loglik, PosteriorMoments) under the model's per-row priors.

    Entries with s = +inf get loglik 0 and their own row-prior moments.
    """
    bh, s = nm_input.beta_hat, nm_input.s
    finite = np.isfinite(s)
    loglik = np.zeros(nm_input.m)
    mean = np.empty(nm_input.m)
    second = np.empty(nm_input.m)
    pnz = np.empty(nm_input.m)
    if np.any(finite):
        log_w = model.log_weights_at(nm_input.D[finite])
        A = component_log_marginals(model.slabs, bh[finite], s[finite])
        loglik[finite] = weighted_mixture_loglik(A, log_w)
        post = weighted_mixture_posterior(model.slabs, bh[finite], s[finite], log_w)
        mean[finite], second[finite], pnz[finite] = post.mean, post.second, post.prob_nonzero
    if np.any(~finite):
        w = model.weights_at(nm_input.D[~finite])
        pm = np.array([0.0] + [sl.prior_moments()[0] for sl in model.slabs])
        ps = np.array([0.0] + [sl.prior_moments()[1] for sl in model.slabs])
        mean[~finite] = w @ pm
        second[~finite] = w @ ps
        pnz[~finite] = 1.0 - w[:, 0]
    return loglik, PosteriorMoments(mean=mean, second=second, prob_nonzero=pnz)


def softmax_mstep_objective(theta: np.ndarray, X1: np.ndarray, resp: np.ndarray, l2: float):
    """Penalized weighted cross-entropy and its gradient for the softmax M-step.

    loss(theta) = -sum_ic resp_ic log softmax_c([0, X1 theta])_i
                  + (l2/2) * ||theta without intercept row||^2

    ``X1`` already carries the intercept column (column 0); the intercept row
    of theta is exempt from the penalty. Returns (loss, grad) with grad shaped
    like theta. Convex in theta for fixed responsibilities.
    """
    scores = np.concatenate([np.zeros((X1.shape[0], 1)), X1 @ theta], axis=1)
    log_p = _log_softmax(scores)
    pen = theta.copy()
    pen[0, :] = 0.0
    loss = -float(np.sum(resp * log_p)) + 0.5 * l2 * float(np.sum(pen * pen))
    P = np.exp(log_p)
    scale = resp.sum(axis=1, keepdims=True)
    grad = X1.T @ (scale * P[:, 1:] - resp[:, 1:]) + l2 * pen
    return loss, grad


def mlp_mstep_objective(params: dict, X: np.ndarray, resp: np.ndarray, l2: float):
    """Penalized weighted cross-entropy and gradients for the MLP M-step.

    loss = -sum_ic resp_ic log softmax(mlp_forward(params, X))_ic
           + (l2/2) * (||W1||^2 + ||W2||^2)

    Biases are exempt from the penalty. Returns (loss, grads) with grads a
    dict shaped like ``params``.
    """
    W1, b1, W2, b2 = params["W1"], params["b1"], params["W2"], params["b2"]
    pre = X @ W1 + b1
    hidden = np.maximum(pre, 0.0)
    scores = hidden @ W2 + b2
    log_p = _log_softmax(scores)
    loss = -float(np.sum(resp * log_p))
    loss += 0.5 * l2 * (float(np.sum(W1 * W1)) + float(np.sum(W2 * W2)))
    P = np.exp(log_p)
    scale = resp.sum(axis=1, keepdims=True)
    dscores = scale * P - resp
    dW2 = hidden.T @ dscores + l2 * W2
    db2 = dscores.sum(axis=0)
    dhidden = (dscores @ W2.T) * (pre > 0)
    dW1 = X.T @ dhidden + l2 * W1
    db1 = dhidden.sum(axis=0)
    return loss, {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


def _fit_softmax_weighted(theta0, X1, resp, l2, max_iter=500):
    """Minimize the convex softmax M-step objective (quasi-Newton).

    Plain gradient descent crawls along the l2-flat directions this objective
    has whenever covariate columns are collinear with the intercept, so a
    curvature-aware method is required for the M-step to actually reach its
    optimum.
    """
    shape = theta0.shape

    def fun(flat):
        loss, grad = softmax_mstep_objective(flat.reshape(shape), X1, resp, l2)
        return loss, grad.ravel()

    res = minimize(
        fun, theta0.ravel(), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-9},
    )
    return res.x.reshape(shape)


def _fit_mlp_weighted(params, X, resp, l2, rng, epochs, batch, lr):
    """Adam on the MLP M-step objective; returns the best full-data iterate."""
    n = X.shape[0]
    p = {k: v.copy() for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(val) for k, val in p.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    best_loss, _ = mlp_mstep_objective(p, X, resp, l2)
    best = {k: val.copy() for k, val in p.items()}
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            # scale so the minibatch gradient estimates the full-data objective
            _, g = mlp_mstep_objective(p, X[idx], resp[idx] * (n / idx.size), l2)
            t += 1
            for k in p:
                m[k] = beta1 * m[k] + (1 - beta1) * g[k]
                v[k] = beta2 * v[k] + (1 - beta2) * g[k] * g[k]
                mhat = m[k] / (1 - beta1**t)
                vhat = v[k] / (1 - beta2**t)
                p[k] = p[k] - lr * mhat / (np.sqrt(vhat) + eps)
        loss, _ = mlp_mstep_objective(p, X, resp, l2)
        if loss < best_loss:
            best_loss = loss
            best = {k: val.copy() for k, val in p.items()}
    return best


def fit_covariate_prior(
    model: CovariatePriorModel,
    nm_input: NormalMeansInput,
    n_outer: int = DEFAULT_OUTER_ITERS,
    l2: float | None = None,
    rng: np.random.Generator | None = None,
    mlp_epochs: int = DEFAULT_MLP_EPOCHS,
    mlp_batch: int = DEFAULT_MLP_BATCH,
    mlp_lr: float = DEFAULT_MLP_LR,
    loglik_tol: float | None = None,
) -> CovariatePriorModel:
    """EM update of the model's parameters on one normal-means problem.

    Runs up to ``n_outer`` EM iterations warm-started from the current
    parameters: E-step responsibilities under the current per-row weights,
    M-step weighted classification fit of the weight model. Each iteration is
    accepted only if the data's total marginal log likelihood did not decrease
    (guarding against penalty bias and stochastic M-steps); a rejected
    iteration ends the loop, as does an accepted improvement below
    ``loglik_tol`` (relative) when that is set. A non-finite M-step resets the
    parameters to zeros.

    Observations with s = +inf are excluded. The slab grid is part of the
    model and never refit here.

    When ``l2`` is None the penalty defaults by model type: a substantial
    ridge for softmax regression and a small weight decay for the MLP.
    Once responsibilities harden toward 0/1 the weighted classification
    problem is often quasi-separable, and an unpenalized (or weakly
    penalized) softmax fit then drives its coefficients to arbitrarily
    large values, turning noise covariates into confident per-row weight
    swings; the stronger ridge keeps the coefficients bounded while
    leaving genuinely predictive covariate effects intact.

    A softmax model whose design rows are all identical is solved exactly
    instead: the intercept is unpenalized, so the penalized optimum zeroes
    every covariate row and the problem reduces to fitting one shared weight
    vector, which the monotone weight EM computes directly.
    """
    if nm_input.D is None:
        raise ValueError("fit_covariate_prior requires covariates (input.D)")
    bh, s = nm_input.beta_hat, nm_input.s
    finite = np.isfinite(s)
    if not np.any(finite):
        return model
    X = nm_input.D[finite]
    A = component_log_marginals(model.slabs, bh[finite], s[finite])
    rng = np.random.default_rng(0) if rng is None else rng

    def total_loglik(mdl):
        return float(weighted_mixture_loglik(A, mdl.log_weights_at(X)).sum())

    if isinstance(model, SoftmaxPriorModel) and np.all(X == X[:1]):
        w0 = model.weights_at(X[:1])[0]
        w, _ = _em_weights(A, w0=w0, max_iter=500, tol=1e-8)
        w = np.clip(w, 1e-12, None)
        w = w / w.sum()
        theta = np.zeros_like(model.theta)
        theta[0, :] = np.log(w[1:]) - np.log(w[0])
        return replace(model, theta=theta)

    if l2 is None:
        l2 = (
            DEFAULT_L2_SOFTMAX
            if isinstance(model, SoftmaxPriorModel)
            else DEFAULT_L2_MLP
        )
    current = model
    current_ll = total_loglik(current)
    X1 = _with_intercept(X) if isinstance(model, SoftmaxPriorModel) else None
    for _ in range(n_outer):
        resp, _ = _responsibilities(A, current.log_weights_at(X))
        if isinstance(current, SoftmaxPriorModel):
            theta = _fit_softmax_weighted(current.theta, X1, resp, l2)
            if not np.all(np.isfinite(theta)):
                warnings.warn("softmax M-step diverged; resetting parameters")
                theta = np.zeros_like(theta)
            candidate = replace(current, theta=theta)
        else:
            params = _fit_mlp_weighted(
                current.params, X, resp, l2, rng, mlp_epochs, mlp_batch, mlp_lr
            )
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                warnings.warn("MLP M-step diverged; resetting parameters")
                params = {k: np.zeros_like(v) for k, v in params.items()}
            candidate = replace(current, params=params)
        candidate_ll = total_loglik(candidate)
        if candidate_ll < current_ll:
            break
        gain = candidate_ll - current_ll
        current, current_ll = candidate, candidate_ll
        if loglik_tol is not None and gain <= loglik_tol * max(1.0, abs(current_ll)):
            break
    return current
