"""Monte-Carlo oracles, independent of the closed-form lower-bound code.

Draws joint samples from the variational factors and averages
log p(Theta, t, X) - log q(Theta) directly from densities, with the bounded
logistic likelihood h standing in for p(t|y) on labeled rows. Also provides
a sampled-residual oracle for the noise-precision rates.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln

from bilatent.data import MultiViewDataset
from bilatent.inference import jj_lambda
from bilatent.state import GammaQ, GaussianRowsQ, ModelState

LOG2PI = float(np.log(2.0 * np.pi))


def _sample_gauss_rows(fac: GaussianRowsQ, rng, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (samples (size, R, Q), log q per sample (size,))."""
    fac = fac.materialize() if fac.mode == "family" else fac
    r, q = fac.mean.shape
    eps = rng.standard_normal((size, r, q))
    if fac.mode == "diag":
        sd = np.sqrt(fac.cov)
        x = fac.mean[None] + eps * sd[None]
        logq = -0.5 * r * q * LOG2PI - 0.5 * np.log(fac.cov).sum() - 0.5 * (eps**2).sum(
            axis=(1, 2)
        )
        return x, logq
    if fac.mode == "shared":
        chol = np.linalg.cholesky(fac.cov)
        x = fac.mean[None] + eps @ chol.T
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        logq = -0.5 * r * q * LOG2PI - 0.5 * r * logdet - 0.5 * (eps**2).sum(axis=(1, 2))
        return x, logq
    chols = np.linalg.cholesky(fac.cov)  # (R, Q, Q)
    x = fac.mean[None] + np.einsum("srq,rpq->srp", eps, chols)
    logdets = 2.0 * np.log(np.diagonal(chols, axis1=1, axis2=2)).sum()
    logq = -0.5 * r * q * LOG2PI - 0.5 * logdets - 0.5 * (eps**2).sum(axis=(1, 2))
    return x, logq


def _sample_gamma(fac: GammaQ, rng, size: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.atleast_1d(fac.alpha)
    b = np.atleast_1d(fac.beta)
    x = rng.gamma(shape=a[None], scale=1.0 / b[None], size=(size,) + a.shape)
    logq = (a * np.log(b) - gammaln(a) + (a - 1.0) * np.log(x) - b * x).sum(
        axis=tuple(range(1, x.ndim))
    )
    return x, logq


def _gamma_logpdf(x: np.ndarray, a0: float, b0: float) -> np.ndarray:
    return (a0 * np.log(b0) - gammaln(a0) + (a0 - 1.0) * np.log(x) - b0 * x).sum(
        axis=tuple(range(1, x.ndim))
    )


def mc_elbo(
    state: ModelState,
    ds: MultiViewDataset,
    n_samples: int = 1_000_000,
    seed: int = 0,
    chunk: int = 50_000,
) -> tuple[float, float]:
    """Monte-Carlo estimate of the lower bound; returns (estimate, std error).

    ``ds`` is the working dataset: masks gate the X likelihood, stored values
    (imputed at masked cells) feed the task-latent regression.
    """
    rng = np.random.default_rng(seed)
    pri = state.hyper.gamma_priors
    labeled = ds.labels.labeled
    t = ds.labels.onehot
    xi = state.xi.xi
    lam_xi = jj_lambda(xi)
    ratios = []
    remaining = n_samples
    while remaining > 0:
        size = min(chunk, remaining)
        remaining -= size
        logp = np.zeros(size)
        logq = np.zeros(size)

        z, lq = _sample_gauss_rows(state.z, rng, size)
        logq += lq
        g, lq = _sample_gauss_rows(state.g, rng, size)
        logq += lq
        y, lq = _sample_gauss_rows(state.y, rng, size)
        logq += lq
        u, lq = _sample_gauss_rows(state.u, rng, size)
        logq += lq
        vy, lq = _sample_gauss_rows(state.vy, rng, size)
        logq += lq
        ws, vs = [], []
        for m in range(state.n_views):
            w, lq = _sample_gauss_rows(state.w[m], rng, size)
            logq += lq
            ws.append(w)
            v, lq = _sample_gauss_rows(state.v[m], rng, size)
            logq += lq
            vs.append(v)
        tau, lq = _sample_gamma(state.tau, rng, size)
        logq += lq
        eta, lq = _sample_gamma(state.eta, rng, size)
        logq += lq
        psis, phis, gammas, deltas, lambdas = [], [], [], [], []
        for m in range(state.n_views):
            for store, fac in (
                (psis, state.psi[m]),
                (phis, state.phi[m]),
                (gammas, state.gamma_ard[m]),
                (deltas, state.delta[m]),
                (lambdas, state.lambda_ard[m]),
            ):
                x, lq = _sample_gamma(fac, rng, size)
                logq += lq
                store.append(x)
        delta_y, lq = _sample_gamma(state.delta_y, rng, size)
        logq += lq
        lambda_y, lq = _sample_gamma(state.lambda_y, rng, size)
        logq += lq

        tau_s = tau.reshape(size)
        eta_s = eta.reshape(size)

        # bounded likelihood h(y, xi) on labeled cells
        if labeled.any():
            yl = y[:, labeled, :]
            h = (
                yl * t[labeled][None]
                + np.log(expit(xi[labeled]))[None]
                - 0.5 * (yl + xi[labeled][None])
                - lam_xi[labeled][None] * (yl**2 - xi[labeled][None] ** 2)
            )
            logp += h.sum(axis=(1, 2))

        # p(Y | Z, U, G, VY, eta)
        mean_y = np.einsum("bnk,bck->bnc", z, u) + np.einsum("bnj,bcj->bnc", g, vy)
        res = ((y - mean_y) ** 2).sum(axis=(1, 2))
        n, c = t.shape
        logp += -0.5 * n * c * LOG2PI + 0.5 * n * c * np.log(eta_s) - 0.5 * eta_s * res

        # p(X | G, V, psi), observed cells only
        for m, view in enumerate(ds.views):
            psi_s = psis[m].reshape(size)
            mean_x = np.einsum("bnj,bdj->bnd", g, vs[m])
            sq = np.where(view.observed[None], (view.values[None] - mean_x) ** 2, 0.0)
            n_obs = float(view.observed.sum())
            logp += (
                -0.5 * n_obs * LOG2PI
                + 0.5 * n_obs * np.log(psi_s)
                - 0.5 * psi_s * sq.sum(axis=(1, 2))
            )

        # p(Z | X, W, tau) with working values
        pred = sum(
            np.einsum("nd,bkd->bnk", view.values, ws[m])
            for m, view in enumerate(ds.views)
        )
        resz = ((z - pred) ** 2).sum(axis=(1, 2))
        k = state.k
        logp += -0.5 * n * k * LOG2PI + 0.5 * n * k * np.log(tau_s) - 0.5 * tau_s * resz

        # p(G), p(U): standard normal entries
        logp += -0.5 * g.shape[1] * g.shape[2] * LOG2PI - 0.5 * (g**2).sum(axis=(1, 2))
        logp += -0.5 * u.shape[1] * u.shape[2] * LOG2PI - 0.5 * (u**2).sum(axis=(1, 2))

        # double-ARD Gaussian priors
        for m in range(state.n_views):
            prec_w = phis[m][:, :, None] * gammas[m][:, None, :]
            logp += 0.5 * (np.log(prec_w) - prec_w * ws[m] ** 2 - LOG2PI).sum(axis=(1, 2))
            prec_v = lambdas[m][:, :, None] * deltas[m][:, None, :]
            logp += 0.5 * (np.log(prec_v) - prec_v * vs[m] ** 2 - LOG2PI).sum(axis=(1, 2))
        prec_vy = lambda_y[:, :, None] * delta_y[:, None, :]
        logp += 0.5 * (np.log(prec_vy) - prec_vy * vy**2 - LOG2PI).sum(axis=(1, 2))

        # Gamma hyperpriors
        logp += _gamma_logpdf(tau, *pri["tau"]) + _gamma_logpdf(eta, *pri["eta"])
        for m in range(state.n_views):
            logp += _gamma_logpdf(psis[m], *pri["psi"])
            logp += _gamma_logpdf(phis[m], *pri["phi"])
            logp += _gamma_logpdf(gammas[m], *pri["gamma"])
            logp += _gamma_logpdf(deltas[m], *pri["delta"])
            logp += _gamma_logpdf(lambdas[m], *pri["lambda"])
        logp += _gamma_logpdf(delta_y, *pri["delta_y"])
        logp += _gamma_logpdf(lambda_y, *pri["lambda_y"])

        ratios.append(logp - logq)
    ratios = np.concatenate(ratios)
    return float(ratios.mean()), float(ratios.std(ddof=1) / np.sqrt(ratios.size))


def mc_y_moments(state: ModelState, rng, n_samples: int = 1_000_000):
    """Sampled predictive output moments: draw z, g, u, vy, noise; form y."""
    size = n_samples
    z, _ = _sample_gauss_rows(state.z, rng, size)
    g, _ = _sample_gauss_rows(state.g, rng, size)
    u, _ = _sample_gauss_rows(state.u, rng, size)
    vy, _ = _sample_gauss_rows(state.vy, rng, size)
    eps = rng.standard_normal((size, z.shape[1], u.shape[1])) / np.sqrt(
        float(state.eta.mean)
    )
    y = np.einsum("bnk,bck->bnc", z, u) + np.einsum("bnj,bcj->bnc", g, vy) + eps
    return y.mean(axis=0), y.var(axis=0, ddof=1), y.std(axis=0, ddof=1)
