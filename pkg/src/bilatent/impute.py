"""Generative imputation of unobserved view entries with predictive variance.

Each row's generative latent is re-inferred from its observed feature blocks
(and, on labeled rows, from the output-view residual); unobserved entries
are then reconstructed through the loadings, with a per-cell variance that
is floored by the view's noise variance 1/<psi>.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import MultiViewDataset
from .linalg import inv_spd
from .state import ModelState


@dataclass
class ImputationResult:
    """Filled value matrices (observed entries verbatim) plus variances.

    ``variance[m]`` is zero at observed cells and >= 1/<psi_m> at imputed ones.
    """

    filled: list[np.ndarray]
    variance: list[np.ndarray]


def restricted_g_posterior(
    state: ModelState, ds: MultiViewDataset, row: int, use_label: bool = True
):
    """q(g) for one row conditioned on its observed feature blocks only.

    Includes the output-view term when the row is labeled and ``use_label``.
    Returns (mean (S,), cov (S, S)).
    """
    s = state.s_active
    prec = np.eye(s)
    rhs = np.zeros(s)
    any_evidence = False
    for m, view in enumerate(ds.views):
        obs = view.observed[row]
        if not obs.any():
            continue
        any_evidence = True
        psi = float(state.psi[m].mean)
        vq = state.v[m]
        if obs.all():
            block = vq.second_moment()
        else:
            miss = np.flatnonzero(~obs)
            vm = vq.mean[miss]
            block = vq.second_moment() - sum_row_covs(vq, miss) - vm.T @ vm
        prec += psi * block
        rhs += psi * view.values[row, obs] @ vq.mean[obs]
    if use_label and ds.labels.labeled[row]:
        any_evidence = True
        eta = float(state.eta.mean)
        prec += eta * state.vy.second_moment()
        resid = state.y.mean[row] - state.z.mean[row] @ state.u.mean.T
        rhs += eta * resid @ state.vy.mean
    if not any_evidence:
        warnings.warn(f"row {row}: no observed entries and no label; imputing from prior")
    cov = inv_spd(prec)
    return rhs @ cov, cov


def sum_row_covs(fac, rows: np.ndarray) -> np.ndarray:
    if fac.mode == "shared":
        return len(rows) * fac.cov
    if fac.mode == "stacked":
        return fac.cov[rows].sum(axis=0)
    return fac.cov.sum_covs(rows)


def impute(state: ModelState, ds: MultiViewDataset) -> ImputationResult:
    """Posterior mean and variance for every unobserved view entry."""
    filled = [np.where(v.observed, v.values, 0.0) for v in ds.views]
    variance = [np.zeros_like(v.values) for v in ds.views]
    rows = np.flatnonzero(
        np.any([~v.observed.all(axis=1) for v in ds.views], axis=0)
    )
    for n in rows:
        g_mean, g_cov = restricted_g_posterior(state, ds, n)
        for m, view in enumerate(ds.views):
            miss = np.flatnonzero(~view.observed[n])
            if miss.size == 0:
                continue
            vq = state.v[m]
            vm = vq.mean[miss]
            filled[m][n, miss] = g_mean @ vm.T
            quad_g = np.array([g_mean @ vq.row_cov(d) @ g_mean for d in miss])
            tr = np.array([float(np.sum(vq.row_cov(d) * g_cov)) for d in miss])
            quad_v = np.einsum("ds,st,dt->d", vm, g_cov, vm)
            variance[m][n, miss] = 1.0 / float(state.psi[m].mean) + tr + quad_g + quad_v
    return ImputationResult(filled, variance)


def refresh_training_imputations(
    state: ModelState, ds: MultiViewDataset, work: MultiViewDataset
) -> None:
    """Replace working values at masked cells with current imputation means.

    ``ds`` is the pristine dataset (original masks and observed values);
    ``work`` is the inference working copy. Masks are never modified, so the
    refresh is idempotent for a fixed state.
    """
    res = impute(state, ds)
    for m, view in enumerate(ds.views):
        missing = ~view.observed
        if missing.any():
            work.views[m].values = np.where(missing, res.filled[m], view.values)


# ---------------------------------------------------------------------------
# Simple reference imputers (benchmark baselines)
# ---------------------------------------------------------------------------


def mean_impute(ds: MultiViewDataset) -> list[np.ndarray]:
    """Per-feature observed-mean fill; the classic baseline."""
    out = []
    for v in ds.views:
        cnt = np.maximum(v.observed.sum(axis=0), 1)
        mu = np.where(v.observed, v.values, 0.0).sum(axis=0) / cnt
        out.append(np.where(v.observed, v.values, mu[None, :]))
    return out


def knn_impute(ds: MultiViewDataset, k: int = 5) -> list[np.ndarray]:
    """k-nearest-neighbour fill using Euclidean distance over mutually
    observed features within each view; falls back to the feature mean when
    no neighbour observes the target feature."""
    means = mean_impute(ds)
    out = []
    for v, mean_filled in zip(ds.views, means):
        vals, obs = v.values, v.observed
        filled = mean_filled.copy()
        need = np.flatnonzero(~obs.all(axis=1))
        for n in need:
            shared = obs[n][None, :] & obs  # (N, D) mutually observed with row n
            diff = np.where(shared, vals - vals[n][None, :], 0.0)
            cnt = shared.sum(axis=1)
            dist = np.sqrt(np.sum(diff**2, axis=1) / np.maximum(cnt, 1))
            dist[cnt == 0] = np.inf
            dist[n] = np.inf
            order = np.argsort(dist)
            for d in np.flatnonzero(~obs[n]):
                donors = [i for i in order if np.isfinite(dist[i]) and obs[i, d]][:k]
                if donors:
                    filled[n, d] = vals[donors, d].mean()
        out.append(filled)
    return out
