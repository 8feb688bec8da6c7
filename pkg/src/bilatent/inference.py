"""Coordinate-ascent updates, the lower bound, ARD pruning and the fit loop.

Every ``update_*`` op replaces one block of variational factors with its
closed-form coordinate maximizer given the current co-factors, so the lower
bound never decreases on fully observed data. Missing entries enter the
closed forms through their current imputed means in the working copy of X
(refreshed once per sweep); the X-likelihood itself always sums over
observed entries only.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, digamma

from .data import MultiViewDataset
from .linalg import ScaledRowCovs, inv_spd
from .state import GammaQ, GaussianRowsQ, Hyperparams, ModelState, init_state

LOG2PI = float(np.log(2.0 * np.pi))


class NumericalError(RuntimeError):
    """A non-finite value appeared; the message names the offending term."""


def jj_lambda(a: np.ndarray) -> np.ndarray:
    """Curvature (sigma(a) - 1/2) / (2a) of the logistic bound; 1/8 at a=0."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    small = np.abs(a) < 1e-6
    safe = np.where(small, 1.0, a)
    out = np.where(small, 0.125 - a**2 / 96.0, (expit(safe) - 0.5) / (2.0 * safe))
    return out


# ---------------------------------------------------------------------------
# Single-factor updates (each one is an exact coordinate maximizer)
# ---------------------------------------------------------------------------


def _stack_x(work: MultiViewDataset) -> list[np.ndarray]:
    return [v.values for v in work.views]


def _y_parent_mean(state: ModelState) -> np.ndarray:
    return state.z.mean @ state.u.mean.T + state.g.mean @ state.vy.mean.T


def update_y(state: ModelState, ds: MultiViewDataset) -> None:
    """q(Y): Jaakkola-bounded posterior on labeled rows, plain Gaussian else."""
    eta = float(state.eta.mean)
    parent = _y_parent_mean(state)
    labeled = ds.labels.labeled[:, None]
    lam = jj_lambda(state.xi.xi)
    var_lab = 1.0 / (eta + 2.0 * lam)
    mean_lab = (ds.labels.onehot - 0.5 + eta * parent) * var_lab
    state.y = GaussianRowsQ(
        np.where(labeled, mean_lab, parent),
        np.where(labeled, var_lab, 1.0 / eta),
        "diag",
    )


def update_xi(state: ModelState) -> None:
    """xi_{nc} <- sqrt(<y_{nc}^2>), the stationary point of the bound."""
    state.xi.xi = np.sqrt(state.y.sq_moments())


def update_y_xi(state: ModelState, ds: MultiViewDataset) -> None:
    update_y(state, ds)
    update_xi(state)


def update_z(state: ModelState, ds: MultiViewDataset) -> None:
    tau = float(state.tau.mean)
    eta = float(state.eta.mean)
    cov = inv_spd(tau * np.eye(state.k) + eta * state.u.second_moment())
    xw = sum(x @ w.mean.T for x, w in zip(_stack_x(ds), state.w))
    resid = state.y.mean - state.g.mean @ state.vy.mean.T
    state.z = GaussianRowsQ((tau * xw + eta * resid @ state.u.mean) @ cov, cov, "shared")


def update_g(state: ModelState, ds: MultiViewDataset) -> None:
    eta = float(state.eta.mean)
    prec = np.eye(state.s_active) + eta * state.vy.second_moment()
    rhs = eta * (state.y.mean - state.z.mean @ state.u.mean.T) @ state.vy.mean
    for x, vq, psi in zip(_stack_x(ds), state.v, state.psi):
        pm = float(psi.mean)
        prec += pm * vq.second_moment()
        rhs = rhs + pm * x @ vq.mean
    cov = inv_spd(prec)
    state.g = GaussianRowsQ(rhs @ cov, cov, "shared")


def update_w_view(state: ModelState, ds: MultiViewDataset, m: int) -> None:
    tau = float(state.tau.mean)
    x = ds.views[m].values
    h = tau * (x.T @ x)
    covs = ScaledRowCovs(state.gamma_ard[m].mean, h, state.phi[m].mean)
    resid = state.z.mean.copy()
    for mp, (xp, wq) in enumerate(zip(_stack_x(ds), state.w)):
        if mp != m:
            resid -= xp @ wq.mean.T
    b = tau * (resid.T @ x)
    state.w[m] = GaussianRowsQ(covs.apply_rows(b), covs, "family")


def update_w(state: ModelState, ds: MultiViewDataset) -> None:
    """Row-wise weight updates, sequential across views (cross-view residual)."""
    for m in range(state.n_views):
        update_w_view(state, ds, m)


def update_v_view(state: ModelState, ds: MultiViewDataset, m: int) -> None:
    psi = float(state.psi[m].mean)
    h = psi * state.g.second_moment()
    covs = ScaledRowCovs(state.delta[m].mean, h, state.lambda_ard[m].mean)
    b = psi * (ds.views[m].values.T @ state.g.mean)
    state.v[m] = GaussianRowsQ(covs.apply_rows(b), covs, "family")


def update_v(state: ModelState, ds: MultiViewDataset) -> None:
    for m in range(state.n_views):
        update_v_view(state, ds, m)


def update_u(state: ModelState) -> None:
    eta = float(state.eta.mean)
    cov = inv_spd(np.eye(state.k) + eta * state.z.second_moment())
    b = eta * (state.y.mean.T @ state.z.mean - state.vy.mean @ (state.g.mean.T @ state.z.mean))
    state.u = GaussianRowsQ(b @ cov, cov, "shared")


def update_vy(state: ModelState) -> None:
    eta = float(state.eta.mean)
    h = eta * state.g.second_moment()
    covs = ScaledRowCovs(state.delta_y.mean, h, state.lambda_y.mean)
    b = eta * (state.y.mean.T @ state.g.mean - state.u.mean @ (state.z.mean.T @ state.g.mean))
    state.vy = GaussianRowsQ(covs.apply_rows(b), covs, "family")


def update_u_vy(state: ModelState, ds: MultiViewDataset | None = None) -> None:
    update_u(state)
    update_vy(state)


# -- noise precisions --------------------------------------------------------


def _residual_y(state: ModelState) -> float:
    """E || Y - Z U^T - G V^Y^T ||_F^2 under the current factors."""
    parent = _y_parent_mean(state)
    utu = state.u.second_moment()
    vytvy = state.vy.second_moment()
    ztz = state.z.second_moment()
    gtg = state.g.second_moment()
    cross = state.u.mean.T @ state.vy.mean  # (K, S)
    out = float(np.sum(state.y.sq_moments()))
    out -= 2.0 * float(np.sum(state.y.mean * parent))
    out += float(np.sum(utu * ztz)) + float(np.sum(vytvy * gtg))
    out += 2.0 * float(np.sum(cross * (state.z.mean.T @ state.g.mean)))
    return out


def _residual_z(state: ModelState, ds: MultiViewDataset) -> float:
    """E || Z - sum_m X W^T ||_F^2 with X taken from the working copy."""
    xs = _stack_x(ds)
    pred = sum(x @ w.mean.T for x, w in zip(xs, state.w))
    out = float(np.trace(state.z.second_moment()))
    out -= 2.0 * float(np.sum(state.z.mean * pred))
    out += float(np.sum(pred**2))
    for x, wq in zip(xs, state.w):
        out += float(wq.traces_with(x.T @ x).sum())
    return out


def _residual_x(state: ModelState, ds: MultiViewDataset, m: int) -> float:
    """Masked E || X - G V^T ||^2 over observed entries of view m."""
    view = ds.views[m]
    vq = state.v[m]
    obs = view.observed
    pred = state.g.mean @ vq.mean.T
    sq_err = (view.values - pred) ** 2
    # Var(g_n v_d^T) = Tr(Sig_G Sig_vd) + g Sig_vd g^T + v Sig_G v^T
    gcov = state.g.cov if state.g.mode == "shared" else None
    if gcov is None:  # pragma: no cover - g is always shared in this model
        raise NumericalError("expected shared covariance for q(G)")
    tr_d = vq.traces_with(gcov)
    quad_g = vq.quad_forms(state.g.mean)
    quad_v = np.einsum("ds,st,dt->d", vq.mean, gcov, vq.mean, optimize=True)
    var = quad_g + (tr_d + quad_v)[None, :]
    return float(np.sum(np.where(obs, sq_err + var, 0.0)))


def update_tau(state: ModelState, ds: MultiViewDataset) -> None:
    a0, b0 = state.hyper.gamma_priors["tau"]
    alpha = np.array(state.n_samples * state.k / 2.0 + a0)
    beta = np.array(b0 + 0.5 * _residual_z(state, ds))
    state.tau = GammaQ(alpha, beta)


def update_eta(state: ModelState) -> None:
    a0, b0 = state.hyper.gamma_priors["eta"]
    alpha = np.array(state.n_samples * state.n_classes / 2.0 + a0)
    beta = np.array(b0 + 0.5 * _residual_y(state))
    state.eta = GammaQ(alpha, beta)


def update_psi(state: ModelState, ds: MultiViewDataset) -> None:
    a0, b0 = state.hyper.gamma_priors["psi"]
    for m in range(state.n_views):
        n_obs = float(ds.views[m].observed.sum())
        alpha = np.array(n_obs / 2.0 + a0)
        beta = np.array(b0 + 0.5 * _residual_x(state, ds, m))
        state.psi[m] = GammaQ(alpha, beta)


def update_noise(state: ModelState, ds: MultiViewDataset) -> None:
    """q(tau), q(eta), q(psi_m): shapes are fixed counts, rates are residuals."""
    update_tau(state, ds)
    update_eta(state)
    update_psi(state, ds)


# -- ARD precisions ----------------------------------------------------------


def update_phi(state: ModelState, m: int) -> None:
    a0, b0 = state.hyper.gamma_priors["phi"]
    sq = state.w[m].sq_moments()
    d = state.w[m].n_cols
    state.phi[m] = GammaQ(
        np.full(state.k, d / 2.0 + a0), b0 + 0.5 * sq @ state.gamma_ard[m].mean
    )


def update_gamma(state: ModelState, m: int) -> None:
    a0, b0 = state.hyper.gamma_priors["gamma"]
    sq = state.w[m].sq_moments()
    d = state.w[m].n_cols
    state.gamma_ard[m] = GammaQ(
        np.full(d, state.k / 2.0 + a0), b0 + 0.5 * sq.T @ state.phi[m].mean
    )


def update_delta(state: ModelState, m: int) -> None:
    a0, b0 = state.hyper.gamma_priors["delta"]
    sq = state.v[m].sq_moments()
    d = state.v[m].n_rows
    state.delta[m] = GammaQ(
        np.full(state.s_active, d / 2.0 + a0), b0 + 0.5 * sq.T @ state.lambda_ard[m].mean
    )


def update_lambda(state: ModelState, m: int) -> None:
    a0, b0 = state.hyper.gamma_priors["lambda"]
    sq = state.v[m].sq_moments()
    d = state.v[m].n_rows
    state.lambda_ard[m] = GammaQ(
        np.full(d, state.s_active / 2.0 + a0), b0 + 0.5 * sq @ state.delta[m].mean
    )


def update_delta_y(state: ModelState) -> None:
    a0, b0 = state.hyper.gamma_priors["delta_y"]
    sq = state.vy.sq_moments()
    state.delta_y = GammaQ(
        np.full(state.s_active, state.n_classes / 2.0 + a0),
        b0 + 0.5 * sq.T @ state.lambda_y.mean,
    )


def update_lambda_y(state: ModelState) -> None:
    a0, b0 = state.hyper.gamma_priors["lambda_y"]
    sq = state.vy.sq_moments()
    state.lambda_y = GammaQ(
        np.full(state.n_classes, state.s_active / 2.0 + a0),
        b0 + 0.5 * sq @ state.delta_y.mean,
    )


def update_ard(state: ModelState, ds: MultiViewDataset | None = None) -> None:
    """All double-ARD precision families, input views plus the output view."""
    for m in range(state.n_views):
        update_phi(state, m)
        update_gamma(state, m)
        update_delta(state, m)
        update_lambda(state, m)
    update_delta_y(state)
    update_lambda_y(state)


# ---------------------------------------------------------------------------
# Evidence lower bound
# ---------------------------------------------------------------------------


def _gamma_prior_term(q: GammaQ, a0: float, b0: float) -> float:
    a = np.atleast_1d(q.alpha)
    return float(
        np.sum(a0 * np.log(b0) - gammaln(a0) + (a0 - 1.0) * q.mean_log - b0 * q.mean)
    )


def _gamma_entropy(q: GammaQ) -> float:
    a, b = np.atleast_1d(q.alpha), np.atleast_1d(q.beta)
    return float(np.sum(a - np.log(b) + gammaln(a) + (1.0 - a) * digamma(a)))


def elbo_terms(state: ModelState, ds: MultiViewDataset) -> dict[str, float]:
    """Every L(q) contribution by name: expected log joint plus entropies."""
    n, k, s, c = state.n_samples, state.k, state.s_active, state.n_classes
    pri = state.hyper.gamma_priors
    terms: dict[str, float] = {}

    labeled = ds.labels.labeled
    if labeled.any():
        xi = state.xi.xi[labeled]
        lam = jj_lambda(xi)
        ym = state.y.mean[labeled]
        ysq = state.y.sq_moments()[labeled]
        t = ds.labels.onehot[labeled]
        terms["jaakkola"] = float(
            np.sum(
                np.log(expit(xi)) + ym * t - 0.5 * (ym + xi) - lam * (ysq - xi**2)
            )
        )
    else:
        terms["jaakkola"] = 0.0

    terms["p_y"] = (
        -0.5 * n * c * LOG2PI
        + 0.5 * n * c * float(state.eta.mean_log)
        - 0.5 * float(state.eta.mean) * _residual_y(state)
    )
    terms["p_z"] = (
        -0.5 * n * k * LOG2PI
        + 0.5 * n * k * float(state.tau.mean_log)
        - 0.5 * float(state.tau.mean) * _residual_z(state, ds)
    )
    px = 0.0
    for m in range(state.n_views):
        n_obs = float(ds.views[m].observed.sum())
        px += (
            -0.5 * n_obs * LOG2PI
            + 0.5 * n_obs * float(state.psi[m].mean_log)
            - 0.5 * float(state.psi[m].mean) * _residual_x(state, ds, m)
        )
    terms["p_x"] = px

    terms["p_g"] = -0.5 * n * s * LOG2PI - 0.5 * float(np.trace(state.g.second_moment()))
    terms["p_u"] = -0.5 * c * k * LOG2PI - 0.5 * float(np.trace(state.u.second_moment()))

    pw = 0.0
    pv = 0.0
    for m in range(state.n_views):
        d = state.w[m].n_cols
        sqw = state.w[m].sq_moments()
        pw += (
            -0.5 * k * d * LOG2PI
            + 0.5 * d * float(np.sum(state.phi[m].mean_log))
            + 0.5 * k * float(np.sum(state.gamma_ard[m].mean_log))
            - 0.5 * float(state.phi[m].mean @ sqw @ state.gamma_ard[m].mean)
        )
        sqv = state.v[m].sq_moments()
        pv += (
            -0.5 * s * d * LOG2PI
            + 0.5 * d * float(np.sum(state.delta[m].mean_log))
            + 0.5 * s * float(np.sum(state.lambda_ard[m].mean_log))
            - 0.5 * float(state.lambda_ard[m].mean @ sqv @ state.delta[m].mean)
        )
    terms["p_w"] = pw
    terms["p_v"] = pv

    sqvy = state.vy.sq_moments()
    terms["p_vy"] = (
        -0.5 * s * c * LOG2PI
        + 0.5 * c * float(np.sum(state.delta_y.mean_log))
        + 0.5 * s * float(np.sum(state.lambda_y.mean_log))
        - 0.5 * float(state.lambda_y.mean @ sqvy @ state.delta_y.mean)
    )

    prior = _gamma_prior_term(state.tau, *pri["tau"])
    prior += _gamma_prior_term(state.eta, *pri["eta"])
    for m in range(state.n_views):
        prior += _gamma_prior_term(state.psi[m], *pri["psi"])
        prior += _gamma_prior_term(state.phi[m], *pri["phi"])
        prior += _gamma_prior_term(state.gamma_ard[m], *pri["gamma"])
        prior += _gamma_prior_term(state.delta[m], *pri["delta"])
        prior += _gamma_prior_term(state.lambda_ard[m], *pri["lambda"])
    prior += _gamma_prior_term(state.delta_y, *pri["delta_y"])
    prior += _gamma_prior_term(state.lambda_y, *pri["lambda_y"])
    terms["p_gamma_priors"] = prior

    # entropies
    terms["h_z"] = 0.5 * n * k * (LOG2PI + 1.0) + 0.5 * state.z.logdet_total()
    terms["h_g"] = 0.5 * n * s * (LOG2PI + 1.0) + 0.5 * state.g.logdet_total()
    terms["h_y"] = 0.5 * n * c * (LOG2PI + 1.0) + 0.5 * state.y.logdet_total()
    terms["h_u"] = 0.5 * c * k * (LOG2PI + 1.0) + 0.5 * state.u.logdet_total()
    terms["h_vy"] = 0.5 * c * s * (LOG2PI + 1.0) + 0.5 * state.vy.logdet_total()
    hw = hv = 0.0
    for m in range(state.n_views):
        d = state.w[m].n_cols
        hw += 0.5 * k * d * (LOG2PI + 1.0) + 0.5 * state.w[m].logdet_total()
        hv += 0.5 * d * s * (LOG2PI + 1.0) + 0.5 * state.v[m].logdet_total()
    terms["h_w"] = hw
    terms["h_v"] = hv
    h_gam = _gamma_entropy(state.tau) + _gamma_entropy(state.eta)
    for m in range(state.n_views):
        for q in (
            state.psi[m],
            state.phi[m],
            state.gamma_ard[m],
            state.delta[m],
            state.lambda_ard[m],
        ):
            h_gam += _gamma_entropy(q)
    h_gam += _gamma_entropy(state.delta_y) + _gamma_entropy(state.lambda_y)
    terms["h_gammas"] = h_gam
    return terms


def compute_elbo(state: ModelState, ds: MultiViewDataset) -> float:
    """L(q) = E_q[log p] - E_q[log q], with the bounded logistic likelihood.

    Raises NumericalError naming the first non-finite term.
    """
    terms = elbo_terms(state, ds)
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericalError(f"non-finite lower-bound term {name!r}: {value}")
    return float(sum(terms.values()))


# ---------------------------------------------------------------------------
# Pruning, trace, fit loop
# ---------------------------------------------------------------------------


def latent_loading_mass(state: ModelState) -> np.ndarray:
    """Expected squared loading mass per generative dimension (input + output)."""
    mass = state.vy.sq_moments().sum(axis=0)
    for m in range(state.n_views):
        mass = mass + state.v[m].sq_moments().sum(axis=0)
    return mass


def prune_latents(state: ModelState, hp: Hyperparams) -> list[int]:
    """Drop generative dimensions whose loading mass is relatively negligible.

    Returns the pruned dimension positions (indices into the pre-prune axis).
    Means and covariances are marginalized consistently across G, every V,
    V^Y and the per-dimension ARD factors.
    """
    mass = latent_loading_mass(state)
    cutoff = hp.prune_rel_threshold * float(mass.max())
    keep = mass > cutoff  # ties at the cutoff are pruned together
    if not keep.any():
        warnings.warn("pruning would remove all dimensions; keeping the largest one")
        keep[int(np.argmax(mass))] = True
    if keep.all():
        return []
    dropped = np.flatnonzero(~keep).tolist()
    idx = np.flatnonzero(keep)

    def shrink(fac: GaussianRowsQ) -> GaussianRowsQ:
        fac = fac.materialize()
        if fac.mode == "shared":
            return GaussianRowsQ(fac.mean[:, idx], fac.cov[np.ix_(idx, idx)], "shared")
        return GaussianRowsQ(fac.mean[:, idx], fac.cov[:, idx][:, :, idx], "stacked")

    state.g = shrink(state.g)
    state.v = [shrink(f) for f in state.v]
    state.vy = shrink(state.vy)
    state.delta = [GammaQ(f.alpha[idx], f.beta[idx]) for f in state.delta]
    state.delta_y = GammaQ(state.delta_y.alpha[idx], state.delta_y.beta[idx])
    state.active_s = [state.active_s[i] for i in idx]
    state.check_dimensions()
    return dropped


@dataclass
class ElboTrace:
    """Per-sweep lower-bound values with pruning/convergence annotations."""

    values: list[float] = field(default_factory=list)
    active_s: list[int] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    def append(self, value: float, active: int, event: str = "") -> None:
        self.values.append(value)
        self.active_s.append(active)
        self.events.append(event)

    def segments(self):
        """Index ranges between pruning events (monotonicity holds inside)."""
        out, start = [], 0
        for i, ev in enumerate(self.events):
            if "prune" in ev and i > start:
                out.append((start, i))
                start = i
        if len(self.values) > start:
            out.append((start, len(self.values)))
        return out


@dataclass
class FitReport:
    iterations: int
    converged: bool
    final_elbo: float
    prune_events: list[tuple[int, int]]  # (sweep, active dims after)
    wall_time_s: float


def fit(ds: MultiViewDataset, hp: Hyperparams):
    """Train by coordinate ascent until the windowed convergence test fires.

    Sweep order: Z, W, tau, G, V, U/V^Y, eta, psi, ARD, periodic prune,
    imputation refresh, then Y/xi. Expects standardized views (missing-cell
    working values start at 0, the per-feature observed mean).

    Returns (state, trace, report).
    """
    from .impute import refresh_training_imputations

    t0 = time.perf_counter()
    rng = np.random.default_rng(hp.seed)
    state = init_state(ds, hp, rng)
    work = ds.copy()
    for v in work.views:
        v.values = np.where(v.observed, v.values, 0.0)
    any_missing = any(not v.observed.all() for v in ds.views)

    trace = ElboTrace()
    history = [compute_elbo(state, work)]
    prune_events: list[tuple[int, int]] = []
    converged = False
    for sweep in range(1, hp.max_iters + 1):
        # Y/xi close the sweep so the soft label encoding in the initial
        # q(Y) survives long enough to seed the first Z/G updates.
        update_z(state, work)
        update_w(state, work)
        update_tau(state, work)
        update_g(state, work)
        update_v(state, work)
        update_u(state)
        update_vy(state)
        update_eta(state)
        update_psi(state, work)
        update_ard(state)
        update_y(state, work)
        update_xi(state)
        event = ""
        if hp.prune_every and sweep % hp.prune_every == 0:
            dropped = prune_latents(state, hp)
            if dropped:
                event = f"prune:{len(dropped)}"
                prune_events.append((sweep, state.s_active))
        if any_missing:
            refresh_training_imputations(state, ds, work)
        value = compute_elbo(state, work)
        if not np.isfinite(value):  # pragma: no cover - compute_elbo raises first
            raise NumericalError("non-finite lower bound")
        history.append(value)
        if sweep >= hp.convergence_window:
            delta = abs(history[sweep - hp.convergence_window] - value)
            eps = (
                abs(value) * hp.convergence_eps
                if hp.convergence_relative
                else hp.convergence_eps
            )
            if delta < eps:
                converged = True
                event = (event + ";converged").lstrip(";")
        trace.append(value, state.s_active, event)
        if converged:
            break
    report = FitReport(
        iterations=len(trace.values),
        converged=converged,
        final_elbo=trace.values[-1],
        prune_events=prune_events,
        wall_time_s=time.perf_counter() - t0,
    )
    return state, trace, report
