"""Evaluation metrics: rank AUC, balanced accuracy, masked-cell RMSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricReport:
    auc: float
    bacc: float
    sensitivity: dict[int, float]
    specificity: dict[int, float]
    n_evaluated: int


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores contribute 1/2. NaN if one class absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_macro(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro one-vs-rest AUC over a per-class score matrix."""
    scores = np.atleast_2d(scores)
    vals = [
        auc(scores[:, c], labels == c)
        for c in range(scores.shape[1])
        if np.any(labels == c) and np.any(labels != c)
    ]
    return float(np.mean(vals)) if vals else float("nan")


def _sens_spec(pred: np.ndarray, labels: np.ndarray, c: int) -> tuple[float, float]:
    pos = labels == c
    sens = float(np.mean(pred[pos] == c)) if pos.any() else float("nan")
    neg = ~pos
    spec = float(np.mean(pred[neg] != c)) if neg.any() else float("nan")
    return sens, spec


def bacc(pred, labels) -> float:
    """Mean over observed classes of (sensitivity + specificity) / 2.

    Binary case reduces to the usual (sensitivity + specificity) / 2.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    vals = []
    for c in classes:
        sens, spec = _sens_spec(pred, labels, int(c))
        if np.isfinite(sens) and np.isfinite(spec):
            vals.append(0.5 * (sens + spec))
    return float(np.mean(vals)) if vals else float("nan")


def rmse_masked(imputed, truth, mask) -> float:
    """Root mean squared error over cells where ``mask`` is True."""
    imputed = np.asarray(imputed, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    diff = (imputed - truth)[mask]
    return float(np.sqrt(np.mean(diff**2)))


def metric_report(proba: np.ndarray, pred: np.ndarray, labels: np.ndarray) -> MetricReport:
    """Evaluate on rows with a known label (label index >= 0)."""
    labels = np.asarray(labels)
    known = labels >= 0
    proba, pred, labels = np.atleast_2d(proba)[known], np.asarray(pred)[known], labels[known]
    if labels.size == 0:
        return MetricReport(float("nan"), float("nan"), {}, {}, 0)
    if proba.shape[1] == 2:
        a = auc(proba[:, 1], labels == 1)
    else:
        a = auc_macro(proba, labels)
    sens, spec = {}, {}
    for c in np.unique(labels):
        sens[int(c)], spec[int(c)] = _sens_spec(pred, labels, int(c))
    return MetricReport(a, bacc(pred, labels), sens, spec, int(labels.size))
