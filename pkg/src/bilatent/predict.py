"""Posterior-predictive classification with calibrated per-class probabilities.

The predictive mean/variance of the latent regression output feed a
probit-corrected sigmoid, sigma(mean / sqrt(1 + pi/8 * var)). Per-class
probabilities are marginal Bernoulli values and are NOT normalized across
classes; hard prediction is their argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import MultiViewDataset, DataError
from .impute import restricted_g_posterior
from .state import GaussianRowsQ, ModelState


@dataclass
class PredictiveOutput:
    proba: np.ndarray      # (N*, C), strictly inside (0, 1)
    y_mean: np.ndarray     # (N*, C)
    y_var: np.ndarray      # (N*, C), >= 1/<eta>
    hard_label: np.ndarray  # (N*,) argmax class index, ties to lowest index

    def proba_normalized(self) -> np.ndarray:
        """Row-normalized view of the marginal probabilities (reporting only)."""
        return self.proba / self.proba.sum(axis=1, keepdims=True)


def project_latents(
    state: ModelState,
    x_star: MultiViewDataset | None = None,
    mode: str = "transductive",
    rows: np.ndarray | None = None,
) -> tuple[GaussianRowsQ, GaussianRowsQ]:
    """Latent posteriors (q(z*), q(g*)) for prediction targets.

    transductive: ``rows`` indexes training rows; returns the fitted factors.
    inductive: ``x_star`` holds unseen rows; g* comes from the observed
    feature blocks only (no label term), missing cells are reconstructed from
    g*, and z* is the weight-map image of the completed features with
    covariance 1/<tau> I.
    """
    if mode == "transductive":
        if rows is None:
            rows = np.arange(state.n_samples)
        rows = np.asarray(rows)
        if rows.size and (rows.min() < 0 or rows.max() >= state.n_samples):
            raise DataError("transductive projection requires training-row indices")
        zq = GaussianRowsQ(state.z.mean[rows], state.z.row_cov(0), "shared")
        gq = GaussianRowsQ(state.g.mean[rows], state.g.row_cov(0), "shared")
        return zq, gq
    if mode != "inductive":
        raise DataError(f"unknown projection mode {mode!r}")
    if x_star is None:
        raise DataError("inductive projection needs x_star")
    n = x_star.n_samples
    s = state.s_active
    g_mean = np.zeros((n, s))
    g_cov = np.zeros((n, s, s))
    for i in range(n):
        if not any(v.observed[i].any() for v in x_star.views):
            raise DataError(f"row {i}: all views fully missing; cannot project")
        g_mean[i], g_cov[i] = restricted_g_posterior(state, x_star, i, use_label=False)
    gq = GaussianRowsQ(g_mean, g_cov, "stacked")
    z_mean = np.zeros((n, state.k))
    for m, view in enumerate(x_star.views):
        filled = np.where(view.observed, view.values, g_mean @ state.v[m].mean.T)
        z_mean += filled @ state.w[m].mean.T
    zq = GaussianRowsQ(z_mean, np.eye(state.k) / float(state.tau.mean), "shared")
    return zq, gq


def _product_variance(aq: GaussianRowsQ, bq: GaussianRowsQ) -> np.ndarray:
    """Var(a_r b_c^T) for independent Gaussian rows, all (r, c) pairs.

    Tr(Sigma_a Sigma_b) + b Sigma_a b^T + a Sigma_b a^T; reduces to the
    coordinatewise sum-of-diagonals form when both covariances are diagonal.
    """
    r, c = aq.n_rows, bq.n_rows
    quad_b_in_a = aq.quad_forms(bq.mean).T  # b_c Sigma_{a_r} b_c^T, (r, c)
    quad_a_in_b = bq.quad_forms(aq.mean)  # a_r Sigma_{b_c} a_r^T, (r, c)
    tr = np.empty((r, c))
    for j in range(c):
        tr[:, j] = aq.traces_with(bq.row_cov(j))
    return tr + quad_b_in_a + quad_a_in_b


def predictive_moments(
    state: ModelState, zq: GaussianRowsQ, gq: GaussianRowsQ
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the regression output for each row and class.

    mean_c = <z><u_c>^T + <g><v_c^Y>^T; the variance adds the output noise
    variance 1/<eta> to the two product-of-independents variances.
    """
    y_mean = zq.mean @ state.u.mean.T + gq.mean @ state.vy.mean.T
    y_var = (
        1.0 / float(state.eta.mean)
        + _product_variance(zq, state.u)
        + _product_variance(gq, state.vy)
    )
    return y_mean, y_var


def predict_proba(y_mean: np.ndarray, y_var: np.ndarray) -> np.ndarray:
    """Probit-corrected sigmoid of the predictive moments (elementwise)."""
    return expit(y_mean / np.sqrt(1.0 + (np.pi / 8.0) * y_var))


def predict_label(proba: np.ndarray) -> np.ndarray:
    """Argmax class per row; exact ties break to the lowest class index."""
    return np.argmax(proba, axis=1)


def zero_factor(template: GaussianRowsQ) -> GaussianRowsQ:
    """A degenerate factor contributing nothing to mean or variance."""
    q = template.mean.shape[1]
    return GaussianRowsQ(
        np.zeros_like(template.mean), np.zeros((q, q)), "shared"
    )


def predict(
    state: ModelState,
    zq: GaussianRowsQ,
    gq: GaussianRowsQ,
    spaces: str = "zg",
) -> PredictiveOutput:
    """Full predictive pipeline; ``spaces`` in {zg, z, g} reproduces the
    single-space ablation by zeroing the excluded space's contribution."""
    if spaces not in ("zg", "z", "g"):
        raise DataError(f"spaces must be one of zg/z/g, got {spaces!r}")
    if spaces == "z":
        gq = zero_factor(gq)
    elif spaces == "g":
        zq = zero_factor(zq)
    y_mean, y_var = predictive_moments(state, zq, gq)
    proba = predict_proba(y_mean, y_var)
    return PredictiveOutput(proba, y_mean, y_var, predict_label(proba))
