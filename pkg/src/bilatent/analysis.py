"""Post-hoc interpretation: cross-fold factor stability, variance explained,
latent-space similarity, and loading reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .state import ModelState


@dataclass
class FoldedLoadings:
    """Per-fold loading matrices on a shared concatenated feature axis.

    Each fold holds a (total_features, n_factors) matrix; factor counts may
    differ across folds (pruning), feature axes may not. ``boundaries`` y
    prefix offsets delimiting each view's block, length n_views + 1.
    """

    folds: list[np.ndarray]
    boundaries: list[int]
    view_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        d = self.folds[0].shape[0]
        if any(f.shape[0] != d for f in self.folds):
            raise ValueError("all folds must share the concatenated feature axis")
        if self.boundaries[0] != 0 or self.boundaries[-1] != d:
            raise ValueError("boundaries must partition the feature axis")


@dataclass
class StableFactor:
    reference_fold: int
    factor_index: int
    matches: list[tuple[int, int, int]]  # (fold, factor index, sign)


@dataclass
class StableFactorSet:
    stable: list[StableFactor]
    n_folds: int
    cos_threshold: float
    min_folds: int

    @property
    def count(self) -> int:
        return len(self.stable)


def _unit_columns(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=0)
    return mat / np.where(norms > 0, norms, 1.0)


def stable_factors(
    folded: FoldedLoadings,
    cos_threshold: float = 0.95,
    min_folds: int = 8,
    reference_fold: int = 0,
) -> StableFactorSet:
    """Factors of the reference fold recurring across folds by |cosine|.

    A reference factor is stable when at least ``min_folds - 1`` other folds
    contain a factor with absolute cosine >= threshold, under greedy
    one-to-one matching per fold pair (highest |cosine| first). Sign flips
    count as matches; the matched sign is recorded.
    """
    ref = _unit_columns(folded.folds[reference_fold])
    n_ref = ref.shape[1]
    matches: list[list[tuple[int, int, int]]] = [[] for _ in range(n_ref)]
    for f, mat in enumerate(folded.folds):
        if f == reference_fold:
            continue
        other = _unit_columns(mat)
        cos = ref.T @ other
        abs_cos = np.abs(cos)
        used_i: set[int] = set()
        used_j: set[int] = set()
        order = np.dstack(np.unravel_index(np.argsort(-abs_cos, axis=None), abs_cos.shape))[0]
        for i, j in order:
            if abs_cos[i, j] < cos_threshold:
                break
            if i in used_i or j in used_j:
                continue
            used_i.add(int(i))
            used_j.add(int(j))
            matches[i].append((f, int(j), 1 if cos[i, j] >= 0 else -1))
    stable = [
        StableFactor(reference_fold, i, matches[i])
        for i in range(n_ref)
        if len(matches[i]) >= min_folds - 1
    ]
    return StableFactorSet(stable, len(folded.folds), cos_threshold, min_folds)


def variance_explained(factor_column: np.ndarray, boundaries: list[int]) -> np.ndarray:
    """Per-view fraction ||w^(m)||^2 / ||w||^2 of a concatenated factor column."""
    col = np.asarray(factor_column, dtype=np.float64)
    total = float(col @ col)
    fracs = []
    for a, b in zip(boundaries[:-1], boundaries[1:]):
        block = col[a:b]
        fracs.append(float(block @ block) / total if total > 0 else 0.0)
    return np.array(fracs)


def zg_similarity(state: ModelState) -> tuple[float, tuple[int, int]]:
    """Largest |cosine| between any task-space and generative-space column."""
    z = _unit_columns(state.z.mean)
    g = _unit_columns(state.g.mean)
    cos = np.abs(z.T @ g)
    k, s = np.unravel_index(np.argmax(cos), cos.shape)
    return float(cos[k, s]), (int(k), int(s))


def folded_from_states(states: list[ModelState], which: str = "generative") -> FoldedLoadings:
    """Concatenated-across-views loading collections from fitted states.

    ``generative`` stacks the view loadings (features x latent dims);
    ``task`` stacks the transposed weight maps (features x task dims).
    """
    first = states[0]
    dims = [w.n_cols for w in first.w]
    boundaries = [0]
    for d in dims:
        boundaries.append(boundaries[-1] + d)
    folds = []
    for st in states:
        if [w.n_cols for w in st.w] != dims:
            raise ValueError("states disagree on view feature dimensions")
        if which == "generative":
            folds.append(np.concatenate([vq.mean for vq in st.v], axis=0))
        elif which == "task":
            folds.append(np.concatenate([wq.mean.T for wq in st.w], axis=0))
        else:
            raise ValueError(f"unknown loading collection {which!r}")
    names = [f"view{m}" for m in range(len(dims))]
    return FoldedLoadings(folds, boundaries, names)


def factor_summary(
    folded: FoldedLoadings,
    stable: StableFactorSet,
    view_feature_names: list[list[str]] | None = None,
    var_threshold: float = 0.10,
    top_n: int = 10,
) -> list[dict]:
    """Per stable factor: views over the variance threshold with their
    strongest features by absolute loading."""
    ref = folded.folds[stable.stable[0].reference_fold] if stable.stable else None
    out = []
    for fac in stable.stable:
        col = folded.folds[fac.reference_fold][:, fac.factor_index]
        fracs = variance_explained(col, folded.boundaries)
        views = []
        for m, frac in enumerate(fracs):
            if frac < var_threshold:
                continue
            a, b = folded.boundaries[m], folded.boundaries[m + 1]
            block = col[a:b]
            top = np.argsort(-np.abs(block))[:top_n]
            if view_feature_names is not None:
                names = [view_feature_names[m][j] for j in top]
            else:
                names = [f"f{j}" for j in top]
            views.append(
                {
                    "view": folded.view_names[m] if folded.view_names else f"view{m}",
                    "variance_fraction": float(frac),
                    "top_features": names,
                    "top_loadings": [float(block[j]) for j in top],
                }
            )
        out.append(
            {
                "factor": fac.factor_index,
                "n_matched_folds": len(fac.matches) + 1,
                "views": views,
            }
        )
    return out
