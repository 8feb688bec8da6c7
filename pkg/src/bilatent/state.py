"""Hyperparameters and the full variational state, with deterministic init.

Factor layout (all row-vector convention, matching the model equations):
  z: N x K, g: N x S, y: N x C (diagonal row covariances),
  w[m]: K x D_m (per-row covariance), v[m]: D_m x S (per-row covariance),
  u: C x K (shared covariance), vy: C x S (per-row covariance),
  plus Gamma factors for tau, eta, psi[m] and the four ARD families.
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import digamma

from .data import MultiViewDataset, DataError

JITTER = 1e-10

ARD_FAMILIES = ("phi", "gamma", "delta", "lambda", "delta_y", "lambda_y")
NOISE_FAMILIES = ("tau", "eta", "psi")


def default_gamma_priors() -> dict[str, tuple[float, float]]:
    """Broad priors for noise precisions and for the generative-side ARD
    families (these must be able to drive irrelevant dimensions to zero);
    mild shrinkage on the task-side weight ARD, whose job is feature
    selection rather than dimension pruning."""
    priors = {name: (1e-3, 1e-3) for name in NOISE_FAMILIES}
    priors.update({name: (1e-3, 1e-3) for name in ARD_FAMILIES})
    priors["phi"] = (1.0, 1.0)
    priors["gamma"] = (1.0, 1.0)
    return priors


@dataclass
class Hyperparams:
    """Latent sizes, Gamma hyperpriors and convergence/pruning controls.

    ``k=None`` defaults to C-1 at init time; ``s`` defaults to 100.
    ``convergence_eps`` drives the windowed test |L_{t-window} - L_t| < eps;
    with ``convergence_relative`` the threshold is |L_t| * convergence_eps.
    ``prune_every=0`` disables pruning.
    """

    k: int | None = None
    s: int = 100
    gamma_priors: dict[str, tuple[float, float]] = field(default_factory=default_gamma_priors)
    convergence_eps: float = 1e-6
    convergence_relative: bool = False
    max_iters: int = 500
    convergence_window: int = 100
    prune_every: int = 10
    prune_rel_threshold: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if self.max_iters < 1 or self.convergence_window < 1:
            raise ValueError("max_iters and convergence_window must be positive")
        if self.convergence_eps <= 0 and not np.isinf(self.convergence_eps):
            raise ValueError("convergence_eps must be positive")
        if self.prune_rel_threshold <= 0:
            raise ValueError("prune_rel_threshold must be positive")
        merged = default_gamma_priors()
        merged.update(self.gamma_priors)
        unknown = set(merged) - set(NOISE_FAMILIES) - set(ARD_FAMILIES)
        if unknown:
            raise ValueError(f"unknown gamma prior families: {sorted(unknown)}")
        for name, (a0, b0) in merged.items():
            if a0 <= 0 or b0 <= 0:
                raise ValueError(f"gamma prior {name}: shapes/rates must be > 0")
        self.gamma_priors = merged

    def resolve_k(self, n_classes: int) -> int:
        if self.k is None:
            return max(n_classes - 1, 1)
        if self.k > max(n_classes - 1, 1):
            warnings.warn(
                f"k={self.k} exceeds C-1={n_classes - 1}; allowed but atypical",
                stacklevel=2,
            )
        return self.k


@dataclass
class GammaQ:
    """Gamma factor(s): elementwise shape/rate with moment accessors."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if np.any(self.alpha <= 0) or np.any(self.beta <= 0):
            raise ValueError("Gamma parameters must be strictly positive")

    @property
    def mean(self) -> np.ndarray:
        return self.alpha / self.beta

    @property
    def mean_log(self) -> np.ndarray:
        return digamma(self.alpha) - np.log(self.beta)

    def copy(self) -> "GammaQ":
        return GammaQ(self.alpha.copy(), self.beta.copy())


class GaussianRowsQ:
    """Gaussian factor over the rows of an R x Q matrix.

    Covariance storage modes:
      * ``shared``: one Q x Q covariance for every row,
      * ``stacked``: an (R, Q, Q) stack, one covariance per row,
      * ``diag``: an (R, Q) array of per-row diagonal variances,
      * ``family``: per-row covariances (scale_r * diag(d) + H)^-1 held in the
        shared-eigenbasis form produced by ``linalg.ScaledRowCovs``.
    """

    def __init__(self, mean: np.ndarray, cov, mode: str):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.mode = mode
        self.cov = cov
        if mode not in ("shared", "stacked", "diag", "family"):
            raise ValueError(f"unknown covariance mode {mode!r}")
        r, q = self.mean.shape
        if mode == "shared" and cov.shape != (q, q):
            raise ValueError("shared covariance shape mismatch")
        if mode == "stacked" and cov.shape != (r, q, q):
            raise ValueError("stacked covariance shape mismatch")
        if mode == "diag" and cov.shape != (r, q):
            raise ValueError("diagonal variance shape mismatch")

    @property
    def n_rows(self) -> int:
        return self.mean.shape[0]

    @property
    def n_cols(self) -> int:
        return self.mean.shape[1]

    def second_moment(self) -> np.ndarray:
        """<A^T A> = mean^T mean + sum of row covariances (Q x Q)."""
        mm = self.mean.T @ self.mean
        if self.mode == "shared":
            return mm + self.n_rows * self.cov
        if self.mode == "stacked":
            return mm + self.cov.sum(axis=0)
        if self.mode == "diag":
            return mm + np.diag(self.cov.sum(axis=0))
        return mm + self.cov.sum_covs()

    def sq_moments(self) -> np.ndarray:
        """Elementwise <a_rq^2> = mean^2 + var (R x Q)."""
        return self.mean**2 + self.var_diag()

    def var_diag(self) -> np.ndarray:
        """Per-row covariance diagonals (R x Q)."""
        if self.mode == "shared":
            return np.broadcast_to(np.diag(self.cov), self.mean.shape)
        if self.mode == "stacked":
            return np.diagonal(self.cov, axis1=1, axis2=2)
        if self.mode == "diag":
            return self.cov
        return self.cov.diags()

    def row_cov(self, r: int) -> np.ndarray:
        if self.mode == "shared":
            return self.cov
        if self.mode == "stacked":
            return self.cov[r]
        if self.mode == "diag":
            return np.diag(self.cov[r])
        return self.cov.row_cov(r)

    def logdet_total(self) -> float:
        """Sum over rows of ln|Sigma_r| (entropy term)."""
        if self.mode == "shared":
            return self.n_rows * _slogdet_spd(self.cov)
        if self.mode == "stacked":
            return float(sum(_slogdet_spd(c) for c in self.cov))
        if self.mode == "diag":
            return float(np.sum(np.log(self.cov)))
        return self.cov.logdet_total()

    def traces_with(self, m: np.ndarray) -> np.ndarray:
        """Tr(M Sigma_r) for each row r."""
        if self.mode == "shared":
            return np.full(self.n_rows, float(np.sum(m * self.cov)))
        if self.mode == "stacked":
            return np.einsum("ij,rji->r", m, self.cov)
        if self.mode == "diag":
            return self.cov @ np.diag(m)  # pragma: no cover - unused for diag
        return self.cov.traces_with(m)

    def quad_forms(self, vectors: np.ndarray) -> np.ndarray:
        """x_i Sigma_r x_i^T for every vector row i and factor row r (I x R)."""
        if self.mode == "shared":
            return np.einsum("ij,jk,ik->i", vectors, self.cov, vectors)[:, None] * np.ones(
                (1, self.n_rows)
            )
        if self.mode == "stacked":
            return np.einsum("ij,rjk,ik->ir", vectors, self.cov, vectors)
        if self.mode == "diag":
            return vectors**2 @ self.cov.T
        return self.cov.quad_forms(vectors)

    def materialize(self) -> "GaussianRowsQ":
        """Copy with the covariance expanded to an explicit stack."""
        if self.mode == "family":
            stack = np.stack([self.cov.row_cov(r) for r in range(self.n_rows)])
            return GaussianRowsQ(self.mean.copy(), stack, "stacked")
        return self.copy()

    def copy(self) -> "GaussianRowsQ":
        cov = self.cov.copy() if hasattr(self.cov, "copy") else self.cov
        return GaussianRowsQ(self.mean.copy(), cov, self.mode)

    def check_spd(self, atol: float = 0.0) -> None:
        """Raise if any row covariance is not symmetric positive definite."""
        if self.mode == "diag":
            if np.any(self.cov <= atol):
                raise ValueError("non-positive diagonal variance")
            return
        if self.mode == "family":
            self.cov.check_positive()
            return
        covs = self.cov[None] if self.mode == "shared" else self.cov
        for c in covs:
            if not np.allclose(c, c.T, atol=1e-8):
                raise ValueError("covariance not symmetric")
            if np.linalg.eigvalsh(c).min() <= atol:
                raise ValueError("covariance not positive definite")


def _slogdet_spd(cov: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance has non-positive determinant")
    return float(logdet)


@dataclass
class XiParams:
    """Per-cell centers of the quadratic bound on the logistic likelihood."""

    xi: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.float64)
        if np.any(self.xi < 0):
            raise ValueError("xi must be elementwise nonnegative")

    def copy(self) -> "XiParams":
        return XiParams(self.xi.copy())


@dataclass
class ModelState:
    """Every variational factor plus the retained generative dimensions."""

    z: GaussianRowsQ
    g: GaussianRowsQ
    y: GaussianRowsQ
    w: list[GaussianRowsQ]
    v: list[GaussianRowsQ]
    u: GaussianRowsQ
    vy: GaussianRowsQ
    tau: GammaQ
    eta: GammaQ
    psi: list[GammaQ]
    phi: list[GammaQ]
    gamma_ard: list[GammaQ]
    delta: list[GammaQ]
    lambda_ard: list[GammaQ]
    delta_y: GammaQ
    lambda_y: GammaQ
    xi: XiParams
    active_s: list[int]
    hyper: Hyperparams

    @property
    def n_samples(self) -> int:
        return self.z.n_rows

    @property
    def k(self) -> int:
        return self.z.n_cols

    @property
    def s_active(self) -> int:
        return self.g.n_cols

    @property
    def n_classes(self) -> int:
        return self.u.n_rows

    @property
    def n_views(self) -> int:
        return len(self.w)

    def copy(self) -> "ModelState":
        return ModelState(
            z=self.z.copy(),
            g=self.g.copy(),
            y=self.y.copy(),
            w=[f.copy() for f in self.w],
            v=[f.copy() for f in self.v],
            u=self.u.copy(),
            vy=self.vy.copy(),
            tau=self.tau.copy(),
            eta=self.eta.copy(),
            psi=[f.copy() for f in self.psi],
            phi=[f.copy() for f in self.phi],
            gamma_ard=[f.copy() for f in self.gamma_ard],
            delta=[f.copy() for f in self.delta],
            lambda_ard=[f.copy() for f in self.lambda_ard],
            delta_y=self.delta_y.copy(),
            lambda_y=self.lambda_y.copy(),
            xi=self.xi.copy(),
            active_s=list(self.active_s),
            hyper=self.hyper,
        )

    def check_dimensions(self) -> None:
        n, k, s, c = self.n_samples, self.k, self.s_active, self.n_classes
        assert self.g.mean.shape == (n, s)
        assert self.y.mean.shape == (n, c)
        assert self.u.mean.shape == (c, k)
        assert self.vy.mean.shape == (c, s)
        assert self.xi.xi.shape == (n, c)
        assert self.delta_y.alpha.shape == (s,)
        assert self.lambda_y.alpha.shape == (c,)
        for m in range(self.n_views):
            d = self.w[m].n_cols
            assert self.w[m].mean.shape == (k, d)
            assert self.v[m].mean.shape == (d, s)
            assert self.phi[m].alpha.shape == (k,)
            assert self.gamma_ard[m].alpha.shape == (d,)
            assert self.delta[m].alpha.shape == (s,)
            assert self.lambda_ard[m].alpha.shape == (d,)
        assert list(self.active_s) == sorted(set(self.active_s))

    def check_covariances(self) -> None:
        for fac in [self.z, self.g, self.y, self.u, self.vy, *self.w, *self.v]:
            fac.check_spd()


def init_state(ds: MultiViewDataset, hp: Hyperparams, rng=None) -> ModelState:
    """Deterministic initialization given the hyperparameter seed.

    Loading/weight means are 0.01-scaled standard normal draws, except the
    output loadings U which start at their prior scale so the soft label
    encoding in q(Y) (2t-1 on labeled rows, 0 elsewhere) can reach the task
    latent space during the first sweeps. Z/G means are zero, all
    covariances are identity, Gamma factors sit at their priors, xi = 1.
    """
    if rng is None:
        rng = np.random.default_rng(hp.seed)
    n, c = ds.n_samples, ds.labels.n_classes
    if n < 1 or c < 1:
        raise DataError("dataset has no rows or no classes")
    k = hp.resolve_k(c)
    s = hp.s
    dims = ds.view_dims
    pri = hp.gamma_priors

    def gamma_init(name: str, size: int | None) -> GammaQ:
        a0, b0 = pri[name]
        if size is None:
            return GammaQ(np.array(a0), np.array(b0))
        return GammaQ(np.full(size, a0), np.full(size, b0))

    y_mean = np.where(ds.labels.labeled[:, None], 2.0 * ds.labels.onehot - 1.0, 0.0)
    state = ModelState(
        z=GaussianRowsQ(np.zeros((n, k)), np.eye(k), "shared"),
        g=GaussianRowsQ(np.zeros((n, s)), np.eye(s), "shared"),
        y=GaussianRowsQ(y_mean, np.ones((n, c)), "diag"),
        w=[
            GaussianRowsQ(0.01 * rng.standard_normal((k, d)), np.tile(np.eye(d), (k, 1, 1)), "stacked")
            for d in dims
        ],
        v=[
            GaussianRowsQ(0.01 * rng.standard_normal((d, s)), np.tile(np.eye(s), (d, 1, 1)), "stacked")
            for d in dims
        ],
        u=GaussianRowsQ(rng.standard_normal((c, k)), np.eye(k), "shared"),
        vy=GaussianRowsQ(0.01 * rng.standard_normal((c, s)), np.tile(np.eye(s), (c, 1, 1)), "stacked"),
        tau=gamma_init("tau", None),
        eta=gamma_init("eta", None),
        psi=[gamma_init("psi", None) for _ in dims],
        phi=[gamma_init("phi", k) for _ in dims],
        gamma_ard=[gamma_init("gamma", d) for d in dims],
        delta=[gamma_init("delta", s) for _ in dims],
        lambda_ard=[gamma_init("lambda", d) for d in dims],
        delta_y=gamma_init("delta_y", s),
        lambda_y=gamma_init("lambda_y", c),
        xi=XiParams(np.ones((n, c))),
        active_s=list(range(s)),
        hyper=hp,
    )
    state.check_dimensions()
    return state


# ---------------------------------------------------------------------------
# Serialization: single npz archive, bit-exact round trip
# ---------------------------------------------------------------------------


def _hyper_to_json(hp: Hyperparams) -> str:
    blob = asdict(hp)
    blob["gamma_priors"] = {k: list(v) for k, v in blob["gamma_priors"].items()}
    return json.dumps(blob)


def _hyper_from_json(text: str) -> Hyperparams:
    blob = json.loads(text)
    blob["gamma_priors"] = {k: tuple(v) for k, v in blob["gamma_priors"].items()}
    return Hyperparams(**blob)


def save_state(state: ModelState, path) -> None:
    """Archive every matrix/vector with a hyperparameter echo (npz)."""
    arrays: dict[str, np.ndarray] = {}

    def put_gauss(prefix: str, fac: GaussianRowsQ):
        fac = fac.materialize() if fac.mode == "family" else fac
        arrays[f"{prefix}.mean"] = fac.mean
        arrays[f"{prefix}.cov"] = np.asarray(fac.cov)
        arrays[f"{prefix}.mode"] = np.array(fac.mode)

    def put_gamma(prefix: str, fac: GammaQ):
        arrays[f"{prefix}.alpha"] = fac.alpha
        arrays[f"{prefix}.beta"] = fac.beta

    put_gauss("z", state.z)
    put_gauss("g", state.g)
    put_gauss("y", state.y)
    put_gauss("u", state.u)
    put_gauss("vy", state.vy)
    for m in range(state.n_views):
        put_gauss(f"w{m}", state.w[m])
        put_gauss(f"v{m}", state.v[m])
        put_gamma(f"psi{m}", state.psi[m])
        put_gamma(f"phi{m}", state.phi[m])
        put_gamma(f"gamma{m}", state.gamma_ard[m])
        put_gamma(f"delta{m}", state.delta[m])
        put_gamma(f"lambda{m}", state.lambda_ard[m])
    put_gamma("tau", state.tau)
    put_gamma("eta", state.eta)
    put_gamma("delta_y", state.delta_y)
    put_gamma("lambda_y", state.lambda_y)
    arrays["xi"] = state.xi.xi
    arrays["active_s"] = np.array(state.active_s, dtype=np.int64)
    arrays["n_views"] = np.array(state.n_views, dtype=np.int64)
    arrays["hyper_json"] = np.array(_hyper_to_json(state.hyper))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_state(path) -> ModelState:
    with np.load(Path(path), allow_pickle=False) as arc:
        def get_gauss(prefix: str) -> GaussianRowsQ:
            return GaussianRowsQ(
                arc[f"{prefix}.mean"], arc[f"{prefix}.cov"], str(arc[f"{prefix}.mode"])
            )

        def get_gamma(prefix: str) -> GammaQ:
            return GammaQ(arc[f"{prefix}.alpha"], arc[f"{prefix}.beta"])

        n_views = int(arc["n_views"])
        state = ModelState(
            z=get_gauss("z"),
            g=get_gauss("g"),
            y=get_gauss("y"),
            w=[get_gauss(f"w{m}") for m in range(n_views)],
            v=[get_gauss(f"v{m}") for m in range(n_views)],
            u=get_gauss("u"),
            vy=get_gauss("vy"),
            tau=get_gamma("tau"),
            eta=get_gamma("eta"),
            psi=[get_gamma(f"psi{m}") for m in range(n_views)],
            phi=[get_gamma(f"phi{m}") for m in range(n_views)],
            gamma_ard=[get_gamma(f"gamma{m}") for m in range(n_views)],
            delta=[get_gamma(f"delta{m}") for m in range(n_views)],
            lambda_ard=[get_gamma(f"lambda{m}") for m in range(n_views)],
            delta_y=get_gamma("delta_y"),
            lambda_y=get_gamma("lambda_y"),
            xi=XiParams(arc["xi"]),
            active_s=[int(i) for i in arc["active_s"]],
            hyper=_hyper_from_json(str(arc["hyper_json"])),
        )
    state.check_dimensions()
    return state
