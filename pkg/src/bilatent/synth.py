"""Forward sampling from the generative process, with known ground truth.

Used by recovery and acceptance tests: g ~ N(0, I); each view is a noisy
linear image of g; the task latent is a noisy linear image of the views;
the output combines both latents plus noise; labels come from the output
rows via argmax (valid one-hot) or independent per-class Bernoulli draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import LabelMatrix, MultiViewDataset, ViewMatrix, apply_mcar_mask


@dataclass
class SynthConfig:
    n: int = 200
    view_dims: tuple[int, ...] = (10, 10)
    s_true: int = 3
    k_true: int = 1
    n_classes: int = 2
    psi: float = 25.0
    tau: float = 25.0
    eta: float = 100.0
    loading_scale: float = 1.0
    weight_scale: float = 1.0
    output_scale: float = 1.0
    vy_scale: float | None = None  # defaults to output_scale
    label_mechanism: str = "argmax"  # or "bernoulli"
    # optional (n_views, s_true) bool mask: which factors load on which views
    v_pattern: np.ndarray | None = None
    # project the true weight maps onto the orthocomplement of the loading
    # span, so the task signal is independent of the generative factors
    w_orth_to_v: bool = False
    # when > 0, inject k_true weak rank-1 view components (this amplitude,
    # directions orthogonal to the loadings) and point the weight maps at
    # them: the task signal then lives in X but outside the strong factors
    task_factor_scale: float = 0.0
    # fixed between-class gap of the output loadings (binary, k_true=1);
    # guards synthetic benchmarks against unlearnable label draws
    u_separation: float | None = None
    mcar_rate: float = 0.0
    mcar_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.s_true, self.k_true, self.n_classes) < 1:
            raise ValueError("all sizes must be >= 1")
        if min(self.view_dims) < 1:
            raise ValueError("view dims must be >= 1")
        if min(self.psi, self.tau, self.eta) <= 0:
            raise ValueError("noise precisions must be > 0")
        if self.label_mechanism not in ("argmax", "bernoulli"):
            raise ValueError(f"unknown label mechanism {self.label_mechanism!r}")


@dataclass
class GroundTruth:
    g: np.ndarray
    z: np.ndarray
    y: np.ndarray
    v: list[np.ndarray]
    w: list[np.ndarray]
    u: np.ndarray
    vy: np.ndarray
    t_raw: np.ndarray  # label-mechanism draws before one-hot validation


def generate(cfg: SynthConfig, rng=None) -> tuple[MultiViewDataset, GroundTruth]:
    """Sample a dataset and its generating variables, deterministic per seed."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n, s, k, c = cfg.n, cfg.s_true, cfg.k_true, cfg.n_classes
    d_total = sum(cfg.view_dims)

    v_list = []
    for m, d in enumerate(cfg.view_dims):
        v = cfg.loading_scale * rng.standard_normal((d, s))
        if cfg.v_pattern is not None:
            v = v * np.asarray(cfg.v_pattern)[m][None, :]
        v_list.append(v)
    w_list = [
        cfg.weight_scale / np.sqrt(d_total) * rng.standard_normal((k, d))
        for d in cfg.view_dims
    ]
    if cfg.w_orth_to_v:
        for m, v in enumerate(v_list):
            q, _ = np.linalg.qr(v)
            w_list[m] = w_list[m] - (w_list[m] @ q) @ q.T
    u = cfg.output_scale * rng.standard_normal((c, k))
    if cfg.u_separation is not None:
        if (c, k) != (2, 1):
            raise ValueError("u_separation requires a binary task with k_true=1")
        u = np.array([[-cfg.u_separation / 2.0], [cfg.u_separation / 2.0]])
    vy_scale = cfg.output_scale if cfg.vy_scale is None else cfg.vy_scale
    vy = vy_scale * rng.standard_normal((c, s))

    task_dirs = None
    if cfg.task_factor_scale > 0:
        task_dirs = []
        for m, (v, d) in enumerate(zip(v_list, cfg.view_dims)):
            q, _ = np.linalg.qr(v)
            dirs = rng.standard_normal((k, d))
            dirs -= (dirs @ q) @ q.T
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            task_dirs.append(dirs)
            w_list[m] = (cfg.weight_scale / len(cfg.view_dims)) * dirs

    g = rng.standard_normal((n, s))
    xs = [
        g @ v.T + rng.standard_normal((n, d)) / np.sqrt(cfg.psi)
        for v, d in zip(v_list, cfg.view_dims)
    ]
    if task_dirs is not None:
        scores = rng.standard_normal((n, k))
        for m in range(len(xs)):
            xs[m] = xs[m] + cfg.task_factor_scale * scores @ task_dirs[m]
    z = sum(x @ w.T for x, w in zip(xs, w_list)) + rng.standard_normal((n, k)) / np.sqrt(
        cfg.tau
    )
    y = z @ u.T + g @ vy.T + rng.standard_normal((n, c)) / np.sqrt(cfg.eta)

    if cfg.label_mechanism == "argmax":
        onehot = np.zeros((n, c))
        onehot[np.arange(n), y.argmax(axis=1)] = 1.0
        labeled = np.ones(n, dtype=bool)
        t_raw = onehot.copy()
    else:
        t_raw = (rng.random((n, c)) < expit(y)).astype(np.float64)
        valid = t_raw.sum(axis=1) == 1.0  # rows violating one-hot become unlabeled
        onehot = np.where(valid[:, None], t_raw, 0.0)
        labeled = valid

    views = [
        ViewMatrix(f"view{m}", x, np.ones_like(x, dtype=bool))
        for m, x in enumerate(xs)
    ]
    labels = LabelMatrix(onehot, labeled, [f"class{i}" for i in range(c)])
    ds = MultiViewDataset(views, labels)
    if cfg.mcar_rate > 0:
        ds = apply_mcar_mask(ds, cfg.mcar_rate, cfg.mcar_seed)
    truth = GroundTruth(g, z, y, v_list, w_list, u, vy, t_raw)
    return ds, truth
