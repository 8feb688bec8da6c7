import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilatent.data import (
    DataError,
    LabelMatrix,
    MultiViewDataset,
    ParseError,
    ViewMatrix,
    apply_mcar_mask,
    destandardize,
    load_dataset,
    load_stats,
    save_stats,
    split_folds,
    standardize,
    write_dataset,
)


def make_ds(n=6, dims=(3, 2), n_classes=2, seed=0, labeled=None):
    rng = np.random.default_rng(seed)
    views = [
        ViewMatrix(f"view{m}", rng.standard_normal((n, d)), np.ones((n, d), dtype=bool))
        for m, d in enumerate(dims)
    ]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), rng.integers(0, n_classes, n)] = 1.0
    lab = np.ones(n, dtype=bool) if labeled is None else labeled
    onehot[~lab] = 0.0
    return MultiViewDataset(views, LabelMatrix(onehot, lab, [f"c{i}" for i in range(n_classes)]))


class TestLoading:
    def test_masked_cell_and_shapes(self, tmp_path):
        (tmp_path / "a.csv").write_text("f0,f1\n1.0,2.0\n3.0,\n5.0,6.0\n-1,0\n2,2\n")
        (tmp_path / "b.csv").write_text("g0\n1\n2\n3\n4\n5\n")
        (tmp_path / "labels.csv").write_text("label\nyes\nno\nyes\nno\nyes\n")
        manifest = {"views": [{"name": "a", "path": "a.csv"}, {"name": "b", "path": "b.csv"}], "labels": "labels.csv"}
        (tmp_path / "m.json").write_text(json.dumps(manifest))
        ds = load_dataset(tmp_path / "m.json")
        assert ds.n_samples == 5 and ds.n_views == 2
        assert not ds.views[0].observed[1, 1]
        assert ds.views[0].observed.sum() == 9
        assert ds.labels.classes == ["yes", "no"]  # first-appearance order
        assert ds.labels.n_classes == 2

    def test_nan_token_case_insensitive(self, tmp_path):
        (tmp_path / "a.csv").write_text("f0\nNaN\n2.0\n")
        (tmp_path / "labels.csv").write_text("label\nx\nx\n")
        (tmp_path / "m.json").write_text(
            json.dumps({"views": [{"name": "a", "path": "a.csv"}], "labels": "labels.csv"})
        )
        ds = load_dataset(tmp_path / "m.json")
        assert not ds.views[0].observed[0, 0]

    def test_row_count_mismatch(self, tmp_path):
        (tmp_path / "a.csv").write_text("f0\n1\n2\n3\n4\n5\n")
        (tmp_path / "b.csv").write_text("g0\n1\n2\n3\n4\n5\n6\n")
        (tmp_path / "labels.csv").write_text("label\nx\nx\nx\nx\nx\n")
        (tmp_path / "m.json").write_text(
            json.dumps(
                {"views": [{"name": "a", "path": "a.csv"}, {"name": "b", "path": "b.csv"}], "labels": "labels.csv"}
            )
        )
        with pytest.raises(DataError):
            load_dataset(tmp_path / "m.json")

    def test_parse_error_carries_location(self, tmp_path):
        (tmp_path / "a.csv").write_text("f0,f1\n1.0,2.0\n3.0,oops\n")
        (tmp_path / "labels.csv").write_text("label\nx\nx\n")
        (tmp_path / "m.json").write_text(
            json.dumps({"views": [{"name": "a", "path": "a.csv"}], "labels": "labels.csv"})
        )
        with pytest.raises(ParseError, match=r"row 3.*column 2"):
            load_dataset(tmp_path / "m.json")

    def test_unlabeled_rows(self, tmp_path):
        (tmp_path / "a.csv").write_text("f0\n1\n2\n3\n")
        (tmp_path / "labels.csv").write_text("label\nx\n\ny\n")
        (tmp_path / "m.json").write_text(
            json.dumps({"views": [{"name": "a", "path": "a.csv"}], "labels": "labels.csv"})
        )
        ds = load_dataset(tmp_path / "m.json")
        assert list(ds.labels.labeled) == [True, False, True]

    def test_round_trip_bit_exact(self, tmp_path):
        ds = make_ds(n=7, dims=(3, 2), seed=3)
        ds.views[0].observed[2, 1] = False
        ds.views[1].observed[0, 0] = False
        ds.labels.labeled[4] = False
        ds.labels.onehot[4] = 0.0
        manifest = write_dataset(ds, tmp_path)
        back = load_dataset(manifest)
        for v, w in zip(ds.views, back.views):
            assert np.array_equal(v.observed, w.observed)
            assert np.array_equal(v.values[v.observed], w.values[w.observed])
        assert np.array_equal(ds.labels.onehot, back.labels.onehot)
        assert np.array_equal(ds.labels.labeled, back.labels.labeled)


class TestStandardize:
    def test_known_column(self):
        ds = make_ds(n=3, dims=(1,), seed=0)
        ds.views[0].values[:, 0] = [1.0, 2.0, 3.0]
        out, stats = standardize(ds)
        np.testing.assert_allclose(
            out.views[0].values[:, 0], [-1.22474487, 0.0, 1.22474487], atol=1e-8
        )

    def test_constant_column_floored(self):
        ds = make_ds(n=4, dims=(2,), seed=0)
        ds.views[0].values[:, 0] = 7.0
        out, stats = standardize(ds)
        assert np.all(out.views[0].values[:, 0] == 0.0)
        assert stats.std["view0"][0] == 1.0

    def test_restandardize_with_own_stats_identity(self):
        ds = make_ds(n=5, dims=(3,), seed=1)
        once, stats = standardize(ds)
        twice, _ = standardize(once)
        again, _ = standardize(once, _fresh_stats_of(once))
        np.testing.assert_allclose(once.views[0].values, again.views[0].values, atol=1e-12)

    def test_train_stats_reused_on_test(self):
        ds = make_ds(n=8, dims=(2,), seed=2)
        _, stats = standardize(ds)
        test = make_ds(n=4, dims=(2,), seed=5)
        out, out_stats = standardize(test, stats)
        assert out_stats is stats
        np.testing.assert_allclose(
            out.views[0].values, (test.views[0].values - stats.mean["view0"]) / stats.std["view0"]
        )

    def test_observed_only_statistics(self):
        ds = make_ds(n=4, dims=(1,), seed=0)
        ds.views[0].values[:, 0] = [1.0, 2.0, 3.0, 100.0]
        ds.views[0].observed[3, 0] = False
        _, stats = standardize(ds)
        assert stats.mean["view0"][0] == pytest.approx(2.0)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_inverse_recovers_observed(self, seed):
        ds = make_ds(n=6, dims=(3,), seed=seed)
        ds.views[0].values *= 7.3
        ds.views[0].values += 11.0
        out, stats = standardize(ds)
        back = destandardize(out, stats)
        orig, rec = ds.views[0].values, back.views[0].values
        np.testing.assert_allclose(rec, orig, rtol=1e-10, atol=1e-10)

    def test_stats_file_round_trip(self, tmp_path):
        ds = make_ds(n=5, dims=(2, 3), seed=4)
        _, stats = standardize(ds)
        save_stats(stats, tmp_path / "s.json")
        back = load_stats(tmp_path / "s.json")
        for name in stats.mean:
            np.testing.assert_allclose(stats.mean[name], back.mean[name])
            np.testing.assert_allclose(stats.std[name], back.std[name])


def _fresh_stats_of(ds):
    _, stats = standardize(ds)
    return stats


class TestMcarMask:
    def test_rate_zero_identity(self):
        ds = make_ds(n=5, dims=(4,))
        out = apply_mcar_mask(ds, 0.0, seed=1)
        assert np.array_equal(out.views[0].observed, ds.views[0].observed)

    def test_rate_one_masks_everything(self):
        ds = make_ds(n=5, dims=(4, 3))
        out = apply_mcar_mask(ds, 1.0, seed=1)
        assert all(not v.observed.any() for v in out.views)
        assert np.array_equal(out.labels.labeled, ds.labels.labeled)

    def test_exact_count_and_determinism(self):
        ds = make_ds(n=10, dims=(5, 5))
        a = apply_mcar_mask(ds, 0.3, seed=7)
        b = apply_mcar_mask(ds, 0.3, seed=7)
        n_masked = sum(int((~v.observed).sum()) for v in a.views)
        assert n_masked == int(0.3 * 100)
        for va, vb in zip(a.views, b.views):
            assert np.array_equal(va.observed, vb.observed)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_observed_count_monotone_in_rate(self, r1, r2, seed):
        ds = make_ds(n=6, dims=(4,))
        lo, hi = sorted([r1, r2])
        a = apply_mcar_mask(ds, lo, seed=seed)
        b = apply_mcar_mask(ds, hi, seed=seed)
        assert a.n_observed() >= b.n_observed()

    def test_never_unmasks(self):
        ds = make_ds(n=6, dims=(4,))
        ds.views[0].observed[0, :] = False
        out = apply_mcar_mask(ds, 0.5, seed=3)
        assert not out.views[0].observed[0].any()


class TestSplitFolds:
    def test_exact_partition(self):
        ds = make_ds(n=10, dims=(2,), n_classes=2, seed=1)
        folds = split_folds(ds, 5, seed=0)
        assert len(folds) == 5
        all_test = np.concatenate([t for _, t in folds])
        assert sorted(all_test.tolist()) == list(range(10))
        assert all(len(t) == 2 for _, t in folds)

    def test_stratified_balanced(self):
        ds = make_ds(n=8, dims=(2,), n_classes=2, seed=0)
        ds.labels.onehot[:] = 0.0
        ds.labels.onehot[:4, 0] = 1.0
        ds.labels.onehot[4:, 1] = 1.0
        folds = split_folds(ds, 2, seed=3)
        idx = ds.labels.class_indices()
        for _, test in folds:
            counts = np.bincount(idx[test], minlength=2)
            assert counts[0] == counts[1]

    def test_determinism(self):
        ds = make_ds(n=12, dims=(2,), seed=2)
        a = split_folds(ds, 3, seed=9)
        b = split_folds(ds, 3, seed=9)
        for (tr1, te1), (tr2, te2) in zip(a, b):
            assert np.array_equal(tr1, tr2) and np.array_equal(te1, te2)

    def test_small_class_falls_back_with_warning(self):
        ds = make_ds(n=6, dims=(2,), n_classes=2, seed=0)
        ds.labels.onehot[:] = 0.0
        ds.labels.onehot[0, 1] = 1.0
        ds.labels.onehot[1:, 0] = 1.0
        with pytest.warns(UserWarning, match="unstratified"):
            folds = split_folds(ds, 3, seed=0)
        all_test = np.concatenate([t for _, t in folds])
        assert sorted(all_test.tolist()) == list(range(6))

    def test_train_test_disjoint(self):
        ds = make_ds(n=11, dims=(2,), seed=5, labeled=np.array([True] * 8 + [False] * 3))
        folds = split_folds(ds, 3, seed=1)
        for train, test in folds:
            assert not set(train) & set(test)
            assert len(train) + len(test) == 11


class TestInvariants:
    def test_labeled_rows_sum_to_one(self):
        with pytest.raises(DataError):
            LabelMatrix(np.array([[1.0, 1.0]]), np.array([True]))

    def test_view_shape_mismatch(self):
        with pytest.raises(DataError):
            ViewMatrix("v", np.zeros((2, 2)), np.ones((2, 3), dtype=bool))

    def test_duplicate_view_names(self):
        v = ViewMatrix("a", np.zeros((2, 1)), np.ones((2, 1), dtype=bool))
        lab = LabelMatrix(np.array([[1.0], [1.0]]), np.array([True, True]))
        with pytest.raises(DataError):
            MultiViewDataset([v, v.copy()], lab)
