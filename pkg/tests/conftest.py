"""Shared numerical oracles used by the test suite.

These re-derive quantities by routes independent of the library's closed
forms: dense-grid integration for posterior moments and direct density
evaluation for marginal likelihoods.
"""

import numpy as np

from cebmf.ebnm import ExponentialSlab, MixturePrior, NormalSlab


def log_norm_pdf(x, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var)


def grid_posterior_oracle(beta_hat, s, prior: MixturePrior, n_points=200_000):
    """Posterior (mean, second, prob_nonzero) by dense trapezoid integration.

    The grid covers the likelihood and every slab's effective support; the
    point mass is handled analytically. Independent of the library's
    conjugate/truncated-normal closed forms.
    """
    los, his = [beta_hat - 12 * s], [beta_hat + 12 * s]
    nonneg_only = True
    for slab in prior.slabs:
        if isinstance(slab, NormalSlab):
            sd = np.sqrt(slab.variance)
            los.append(slab.mean - 12 * sd)
            his.append(slab.mean + 12 * sd)
            nonneg_only = False
        else:
            los.append(0.0)
            his.append(max(beta_hat, 0.0) + 12 * s + 12 * slab.scale)
    lo, hi = min(los), max(his)
    if nonneg_only:
        lo = 0.0
    t = np.linspace(lo, hi, n_points)

    dens = np.zeros_like(t)
    w = prior.weight_vector()
    for c, slab in enumerate(prior.slabs):
        with np.errstate(divide="ignore"):
            dens += w[c + 1] * np.exp(log_norm_pdf(beta_hat, t, s * s) + slab.log_pdf(t))
    slab_mass = np.trapezoid(dens, t)
    slab_m1 = np.trapezoid(t * dens, t)
    slab_m2 = np.trapezoid(t * t * dens, t)
    spike_mass = w[0] * np.exp(log_norm_pdf(beta_hat, 0.0, s * s))
    Z = spike_mass + slab_mass
    return slab_m1 / Z, slab_m2 / Z, slab_mass / Z


def random_mixture_prior(rng, family, s_floor, beta_scale, max_slabs=4):
    """A random prior whose scales stay inside the quadrature oracle's envelope."""
    M = int(rng.integers(1, max_slabs + 1))
    raw = rng.dirichlet(np.ones(M + 1))
    if family == "normal":
        slabs = tuple(
            NormalSlab(
                mean=float(rng.normal(0, beta_scale / 2)),
                variance=float(rng.uniform(0.5 * s_floor, 2.0 * beta_scale)) ** 2,
            )
            for _ in range(M)
        )
    elif family == "exp":
        slabs = tuple(
            ExponentialSlab(scale=float(rng.uniform(0.5 * s_floor, 2.0 * beta_scale)))
            for _ in range(M)
        )
    elif family == "point_normal":
        slabs = (NormalSlab(0.0, float(rng.uniform(0.5 * s_floor, 2.0 * beta_scale)) ** 2),)
        raw = np.array([rng.uniform(0.05, 0.95)])
        raw = np.array([raw[0], 1 - raw[0]])
    else:
        raise ValueError(family)
    return MixturePrior(pi0=float(raw[0]), slabs=slabs, weights=raw[1:] / raw[1:].sum() * (1 - raw[0]))
