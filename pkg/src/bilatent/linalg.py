"""Shared-eigenbasis representation for families of per-row covariances.

Every per-row posterior covariance in this model has the form

    Sigma_r = (scale_r * diag(lam) + H)^{-1},

with one positive scalar per row, a fixed positive diagonal and a fixed
symmetric PSD matrix. Writing B = diag(lam)^{-1/2} H diag(lam)^{-1/2} =
Q Omega Q^T gives

    Sigma_r = E diag(1 / (scale_r + omega)) E^T,   E = diag(lam)^{-1/2} Q,

so one eigendecomposition serves every row: means, diagonals, traces,
log-determinants and quadratic forms all become cheap matrix products.
"""

from __future__ import annotations

import numpy as np

JITTER = 1e-10


class ScaledRowCovs:
    """Covariances (scale_r * diag(lam) + H)^{-1} for all rows at once."""

    def __init__(self, lam: np.ndarray, h: np.ndarray, scales: np.ndarray):
        lam = np.asarray(lam, dtype=np.float64)
        scales = np.asarray(scales, dtype=np.float64)
        if np.any(lam <= 0) or np.any(scales <= 0):
            raise ValueError("lam and scales must be strictly positive")
        h = np.asarray(h, dtype=np.float64)
        h = 0.5 * (h + h.T) + JITTER * np.eye(h.shape[0])
        root = 1.0 / np.sqrt(lam)
        b = root[:, None] * h * root[None, :]
        omega, q = np.linalg.eigh(b)
        self.omega = np.maximum(omega, 0.0)
        self.e = root[:, None] * q
        self.scales = scales
        self.lam = lam
        # inv_w[r, j] = 1 / (scale_r + omega_j)
        self.inv_w = 1.0 / (scales[:, None] + self.omega[None, :])

    @property
    def n_rows(self) -> int:
        return self.scales.shape[0]

    @property
    def dim(self) -> int:
        return self.e.shape[0]

    def row_cov(self, r: int) -> np.ndarray:
        return (self.e * self.inv_w[r]) @ self.e.T

    def sum_covs(self, rows=None) -> np.ndarray:
        w = self.inv_w if rows is None else self.inv_w[rows]
        return (self.e * w.sum(axis=0)) @ self.e.T

    def diags(self) -> np.ndarray:
        """diag(Sigma_r) for every row, shape (R, dim)."""
        return self.inv_w @ (self.e**2).T

    def traces_with(self, m: np.ndarray) -> np.ndarray:
        """Tr(M Sigma_r) for every row, shape (R,)."""
        c = np.einsum("ij,jk,ik->k", m, self.e, self.e, optimize=True)
        return self.inv_w @ c

    def quad_forms(self, vectors: np.ndarray) -> np.ndarray:
        """x_i Sigma_r x_i^T for every (vector i, row r), shape (I, R)."""
        p = (vectors @ self.e) ** 2
        return p @ self.inv_w.T

    def apply_rows(self, b: np.ndarray) -> np.ndarray:
        """b_r Sigma_r for every row of b, shape (R, dim)."""
        return ((b @ self.e) * self.inv_w) @ self.e.T

    def logdet_total(self) -> float:
        """Sum over rows of ln|Sigma_r|."""
        per_row = np.log(self.inv_w).sum(axis=1)
        return float(per_row.sum() - self.n_rows * np.log(self.lam).sum())

    def logdets(self) -> np.ndarray:
        return np.log(self.inv_w).sum(axis=1) - np.log(self.lam).sum()

    def check_positive(self) -> None:
        if not np.all(np.isfinite(self.inv_w)) or np.any(self.inv_w <= 0):
            raise ValueError("row covariance family is not positive definite")

    def copy(self) -> "ScaledRowCovs":
        out = object.__new__(ScaledRowCovs)
        out.omega = self.omega.copy()
        out.e = self.e.copy()
        out.scales = self.scales.copy()
        out.lam = self.lam.copy()
        out.inv_w = self.inv_w.copy()
        return out


def inv_spd(precision: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix with a jitter guard."""
    p = 0.5 * (precision + precision.T) + JITTER * np.eye(precision.shape[0])
    try:
        chol = np.linalg.cholesky(p)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"precision matrix not SPD after jitter: {e}")
    inv_chol = np.linalg.inv(chol)
    return inv_chol.T @ inv_chol
