"""Random small perturbations of variational factors for optimality checks.

After an exact coordinate update, no nearby member of the factor's family may
raise the lower bound; these helpers produce such neighbours while keeping
covariances positive definite (Cholesky-space noise) and Gamma parameters
positive (log-space noise).
"""

from __future__ import annotations

import numpy as np

from bilatent.state import GammaQ, GaussianRowsQ, ModelState


def perturb_gauss(fac: GaussianRowsQ, rng, scale: float = 1e-3) -> GaussianRowsQ:
    fac = fac.materialize()
    mean = fac.mean + scale * rng.standard_normal(fac.mean.shape)
    if fac.mode == "diag":
        var = fac.cov * np.exp(scale * rng.standard_normal(fac.cov.shape))
        return GaussianRowsQ(mean, var, "diag")

    def jiggle(cov):
        chol = np.linalg.cholesky(cov)
        q = cov.shape[0]
        noise = np.tril(rng.standard_normal((q, q)), k=-1) * scale
        diag = np.exp(scale * rng.standard_normal(q))
        chol = chol @ np.diag(diag) + noise * np.mean(np.diag(chol))
        return chol @ chol.T

    if fac.mode == "shared":
        return GaussianRowsQ(mean, jiggle(fac.cov), "shared")
    return GaussianRowsQ(mean, np.stack([jiggle(c) for c in fac.cov]), "stacked")


def perturb_gamma(fac: GammaQ, rng, scale: float = 1e-3) -> GammaQ:
    alpha = fac.alpha * np.exp(scale * rng.standard_normal(fac.alpha.shape))
    beta = fac.beta * np.exp(scale * rng.standard_normal(fac.beta.shape))
    return GammaQ(alpha, beta)


def perturbed_state(state: ModelState, field: str, rng, scale: float = 1e-3, m: int | None = None):
    """Copy of ``state`` with one factor perturbed; field names the attribute."""
    out = state.copy()
    fac = getattr(out, field)
    if isinstance(fac, list):
        assert m is not None
        if isinstance(fac[m], GaussianRowsQ):
            fac[m] = perturb_gauss(fac[m], rng, scale)
        else:
            fac[m] = perturb_gamma(fac[m], rng, scale)
    elif isinstance(fac, GaussianRowsQ):
        setattr(out, field, perturb_gauss(fac, rng, scale))
    else:
        setattr(out, field, perturb_gamma(fac, rng, scale))
    return out
