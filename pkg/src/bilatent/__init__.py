"""Semi-supervised multi-view Bayesian factor model with a task-oriented and
a generative latent space, trained by coordinate-ascent variational inference
with double-ARD sparsity, plus posterior-predictive classification and
generative missing-data imputation."""

from .data import (
    LabelMatrix,
    MultiViewDataset,
    StandardizeStats,
    ViewMatrix,
    apply_mcar_mask,
    load_dataset,
    split_folds,
    standardize,
    write_dataset,
)
from .inference import ElboTrace, FitReport, compute_elbo, fit
from .state import GammaQ, GaussianRowsQ, Hyperparams, ModelState, init_state

__all__ = [
    "LabelMatrix",
    "MultiViewDataset",
    "StandardizeStats",
    "ViewMatrix",
    "apply_mcar_mask",
    "load_dataset",
    "split_folds",
    "standardize",
    "write_dataset",
    "ElboTrace",
    "FitReport",
    "compute_elbo",
    "fit",
    "GammaQ",
    "GaussianRowsQ",
    "Hyperparams",
    "ModelState",
    "init_state",
]

__version__ = "0.1.0"
