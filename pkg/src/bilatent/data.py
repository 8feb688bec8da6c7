"""Multi-view datasets: loading, validation, standardization, masking, splits.

A dataset is M view matrices observed on the same N samples, each with a
per-entry observation mask, plus a partially observed one-hot label matrix
(semi-supervised: unlabeled rows carry no class information).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-8
DEFAULT_MISSING_TOKENS = ("", "nan")


class DataError(ValueError):
    """Structural problem in a dataset or manifest (shapes, labels, counts)."""


class ParseError(DataError):
    """Malformed cell in a tabular file; message carries file/row/column."""


@dataclass
class ViewMatrix:
    """One modality: an N x D value matrix plus its observation mask.

    Entries with ``observed == False`` are ignored by every likelihood
    computation; their stored value is irrelevant.
    """

    name: str
    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.ndim != 2:
            raise DataError(f"view {self.name!r}: values must be 2-D")
        if self.values.shape != self.observed.shape:
            raise DataError(
                f"view {self.name!r}: values {self.values.shape} and mask "
                f"{self.observed.shape} differ"
            )
        n, d = self.values.shape
        if n < 1 or d < 1:
            raise DataError(f"view {self.name!r}: empty dimension {self.values.shape}")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "ViewMatrix":
        return ViewMatrix(self.name, self.values.copy(), self.observed.copy())


@dataclass
class LabelMatrix:
    """One-hot labels over C classes with a per-row labeled mask."""

    onehot: np.ndarray
    labeled: np.ndarray
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.onehot = np.asarray(self.onehot, dtype=np.float64)
        self.labeled = np.asarray(self.labeled, dtype=bool)
        if self.onehot.ndim != 2:
            raise DataError("labels: onehot must be 2-D")
        if self.labeled.shape != (self.onehot.shape[0],):
            raise DataError("labels: labeled mask length mismatch")
        if not self.classes:
            self.classes = [f"class{c}" for c in range(self.onehot.shape[1])]
        if len(self.classes) != self.onehot.shape[1]:
            raise DataError("labels: class names do not match one-hot width")
        rows = self.onehot[self.labeled]
        if rows.size and not np.allclose(rows.sum(axis=1), 1.0):
            raise DataError("labels: each labeled row must sum to exactly 1")

    @property
    def n_classes(self) -> int:
        return self.onehot.shape[1]

    def class_indices(self) -> np.ndarray:
        """Argmax class index per row; -1 on unlabeled rows."""
        idx = self.onehot.argmax(axis=1)
        return np.where(self.labeled, idx, -1)

    def copy(self) -> "LabelMatrix":
        return LabelMatrix(self.onehot.copy(), self.labeled.copy(), list(self.classes))


@dataclass
class MultiViewDataset:
    views: list[ViewMatrix]
    labels: LabelMatrix

    def __post_init__(self):
        if not self.views:
            raise DataError("dataset needs at least one view")
        n = self.views[0].n_samples
        for v in self.views:
            if v.n_samples != n:
                raise DataError(
                    f"view {v.name!r} has {v.n_samples} rows, expected {n}"
                )
        if self.labels.onehot.shape[0] != n:
            raise DataError(
                f"labels have {self.labels.onehot.shape[0]} rows, expected {n}"
            )
        names = [v.name for v in self.views]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate view names: {names}")

    @property
    def n_samples(self) -> int:
        return self.views[0].n_samples

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def view_dims(self) -> list[int]:
        return [v.n_features for v in self.views]

    def n_observed(self) -> int:
        return int(sum(v.observed.sum() for v in self.views))

    def copy(self) -> "MultiViewDataset":
        return MultiViewDataset([v.copy() for v in self.views], self.labels.copy())

    def subset(self, rows: np.ndarray) -> "MultiViewDataset":
        """Row-subset dataset (used for supervised train/test splits)."""
        rows = np.asarray(rows)
        views = [
            ViewMatrix(v.name, v.values[rows], v.observed[rows]) for v in self.views
        ]
        labels = LabelMatrix(
            self.labels.onehot[rows], self.labels.labeled[rows], list(self.labels.classes)
        )
        return MultiViewDataset(views, labels)

    def mask_labels(self, rows: np.ndarray) -> "MultiViewDataset":
        """Copy with the given rows switched to unlabeled (transductive protocol)."""
        out = self.copy()
        out.labels.labeled[np.asarray(rows)] = False
        return out


@dataclass
class StandardizeStats:
    """Per-view per-feature mean/std computed over observed entries only."""

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# Tabular I/O
# ---------------------------------------------------------------------------


def _parse_cell(text: str, tokens: tuple[str, ...], where: tuple[str, int, int]):
    stripped = text.strip()
    if stripped.lower() in tokens:
        return np.nan, False
    try:
        return float(stripped), True
    except ValueError:
        path, row, col = where
        raise ParseError(
            f"{path}: non-numeric cell {text!r} at row {row}, column {col}"
        ) from None


def _read_view_csv(path: Path, name: str, tokens: tuple[str, ...]) -> ViewMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows, masks = [], []
        for i, row in enumerate(reader):
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {i + 2} has {len(row)} cells, expected {len(header)}"
                )
            vals, obs = zip(
                *(_parse_cell(c, tokens, (str(path), i + 2, j + 1)) for j, c in enumerate(row))
            )
            rows.append(vals)
            masks.append(obs)
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64)
    observed = np.array(masks, dtype=bool)
    values[~observed] = 0.0
    return ViewMatrix(name, values, observed)


def _read_labels_csv(path: Path, classes: list[str] | None) -> LabelMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)  # header
        raw = [row[0].strip() if row else "" for row in reader]
    order = list(classes) if classes else []
    for lab in raw:
        if lab and lab not in order:
            if classes:
                raise DataError(f"{path}: label {lab!r} not in declared classes")
            order.append(lab)
    if not order:
        raise DataError(f"{path}: no labeled rows and no class list given")
    n, c = len(raw), len(order)
    onehot = np.zeros((n, c))
    labeled = np.zeros(n, dtype=bool)
    for i, lab in enumerate(raw):
        if lab:
            onehot[i, order.index(lab)] = 1.0
            labeled[i] = True
    return LabelMatrix(onehot, labeled, order)


def load_dataset(manifest_path) -> MultiViewDataset:
    """Load the dataset described by a JSON manifest.

    The manifest lists one tabular file per view plus a label file; all files
    must share the row count. Missing cells (empty or the missing token,
    case-insensitive) become ``observed=False``; rows with an empty class
    become ``labeled=False``.
    """
    manifest_path = Path(manifest_path)
    try:
        spec = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: invalid manifest JSON: {e}") from None
    base = manifest_path.parent
    tokens = set(DEFAULT_MISSING_TOKENS)
    if spec.get("missing_token"):
        tokens.add(str(spec["missing_token"]).strip().lower())
    tokens = tuple(tokens)

    if "views" not in spec or "labels" not in spec:
        raise DataError(f"{manifest_path}: manifest needs 'views' and 'labels'")
    views = [
        _read_view_csv(base / v["path"], v.get("name", f"view{i}"), tokens)
        for i, v in enumerate(spec["views"])
    ]
    labels = _read_labels_csv(base / spec["labels"], spec.get("classes"))
    return MultiViewDataset(views, labels)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(ds: MultiViewDataset, out_dir, missing_token: str = "") -> Path:
    """Write view/label CSVs plus a manifest; inverse of ``load_dataset``.

    Observed values and masks round-trip bit-exactly (shortest float repr).
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    view_entries = []
    for v in ds.views:
        fname = f"{v.name}.csv"
        with open(out_dir / fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{j}" for j in range(v.n_features)])
            for i in range(v.n_samples):
                w.writerow(
                    [
                        _fmt(v.values[i, j]) if v.observed[i, j] else missing_token
                        for j in range(v.n_features)
                    ]
                )
        view_entries.append({"name": v.name, "path": fname})
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"])
        idx = ds.labels.class_indices()
        for i in range(ds.n_samples):
            w.writerow([ds.labels.classes[idx[i]] if idx[i] >= 0 else ""])
    manifest = {
        "views": view_entries,
        "labels": "labels.csv",
        "missing_token": missing_token,
        "classes": list(ds.labels.classes),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def standardize(
    ds: MultiViewDataset, stats: StandardizeStats | None = None
) -> tuple[MultiViewDataset, StandardizeStats]:
    """Z-score each feature over its observed entries (population std).

    With ``stats`` given, transforms using those statistics instead (train-stat
    reuse on test data). Stds below ``STD_FLOOR`` are replaced by 1.0 so
    constant columns map to zeros.
    """
    if stats is None:
        mean, std = {}, {}
        for v in ds.views:
            obs = v.observed
            cnt = np.maximum(obs.sum(axis=0), 1)
            mu = np.where(obs, v.values, 0.0).sum(axis=0) / cnt
            var = np.where(obs, (v.values - mu) ** 2, 0.0).sum(axis=0) / cnt
            sd = np.sqrt(var)
            sd = np.where(sd < STD_FLOOR, 1.0, sd)
            mean[v.name], std[v.name] = mu, sd
        stats = StandardizeStats(mean, std)
    views = []
    for v in ds.views:
        mu, sd = stats.mean[v.name], stats.std[v.name]
        vals = np.where(v.observed, (v.values - mu) / sd, 0.0)
        views.append(ViewMatrix(v.name, vals, v.observed.copy()))
    return MultiViewDataset(views, ds.labels.copy()), stats


def destandardize(ds: MultiViewDataset, stats: StandardizeStats) -> MultiViewDataset:
    views = []
    for v in ds.views:
        vals = np.where(v.observed, v.values * stats.std[v.name] + stats.mean[v.name], 0.0)
        views.append(ViewMatrix(v.name, vals, v.observed.copy()))
    return MultiViewDataset(views, ds.labels.copy())


def save_stats(stats: StandardizeStats, path) -> None:
    blob = {
        name: {"mean": stats.mean[name].tolist(), "std": stats.std[name].tolist()}
        for name in stats.mean
    }
    Path(path).write_text(json.dumps(blob, indent=2))


def load_stats(path) -> StandardizeStats:
    blob = json.loads(Path(path).read_text())
    return StandardizeStats(
        {k: np.array(v["mean"]) for k, v in blob.items()},
        {k: np.array(v["std"]) for k, v in blob.items()},
    )


# ---------------------------------------------------------------------------
# Masking and splits
# ---------------------------------------------------------------------------


def apply_mcar_mask(ds: MultiViewDataset, rate: float, seed: int) -> MultiViewDataset:
    """Mask exactly floor(rate * n_observed) additional entries uniformly.

    Deterministic per seed; labels untouched; never unmasks anything.
    """
    if not 0.0 <= rate <= 1.0:
        raise DataError(f"mcar rate {rate} outside [0, 1]")
    out = ds.copy()
    pool = []
    for m, v in enumerate(out.views):
        r, c = np.nonzero(v.observed)
        pool.append(np.column_stack([np.full(r.size, m), r, c]))
    pool = np.concatenate(pool, axis=0)
    n_mask = int(np.floor(rate * len(pool)))
    if n_mask == 0:
        return out
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pool), size=n_mask, replace=False)
    for m, r, c in pool[chosen]:
        out.views[m].observed[r, c] = False
    return out


def split_folds(ds: MultiViewDataset, n_folds: int, seed: int):
    """Disjoint covering test folds, stratified by class among labeled rows.

    Returns a list of (train_indices, test_indices) pairs. A class with fewer
    members than folds triggers a warning and an unstratified fallback.
    """
    if n_folds < 2:
        raise DataError("n_folds must be >= 2")
    n = ds.n_samples
    if n < n_folds:
        raise DataError(f"cannot split {n} rows into {n_folds} folds")
    rng = np.random.default_rng(seed)
    idx = ds.labels.class_indices()
    groups = [np.flatnonzero(idx == c) for c in range(ds.labels.n_classes)]
    groups.append(np.flatnonzero(~ds.labels.labeled))
    labeled_sizes = [g.size for g in groups[:-1] if g.size > 0]
    stratified = all(s >= n_folds for s in labeled_sizes)
    if not stratified:
        warnings.warn(
            "a class has fewer members than folds; falling back to unstratified split",
            stacklevel=2,
        )
        groups = [np.arange(n)]
    test_sets = [[] for _ in range(n_folds)]
    offset = 0
    for g in groups:
        if g.size == 0:
            continue
        g = rng.permutation(g)
        for j, row in enumerate(g):
            test_sets[(offset + j) % n_folds].append(row)
        offset += g.size  # rotate so small groups do not pile onto fold 0
    folds = []
    all_rows = np.arange(n)
    for t in test_sets:
        test = np.sort(np.array(t, dtype=int))
        train = np.setdiff1d(all_rows, test)
        folds.append((train, test))
    return folds
