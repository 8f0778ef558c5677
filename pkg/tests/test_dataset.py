import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dimrobust import dataset as ds
from dimrobust.errors import ConfigError, DataError


def write(tmp_path, text, name="data.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def series(features, labels):
    return ds.RawSeries(np.asarray(features, dtype=float), np.asarray(labels, dtype=np.int64))


class TestLoad:
    def test_three_rows(self, tmp_path):
        raw = ds.load_delimited(write(tmp_path, "1 2 1\n3 4 2\n5 6 1\n"), drop_labels=())
        assert raw.n == 3 and raw.d == 2
        np.testing.assert_array_equal(raw.features[:, 0], [1, 3, 5])
        assert raw.class_values == (1, 2)
        np.testing.assert_array_equal(raw.labels, [0, 1, 0])

    def test_drops_null_label_and_keeps_order(self, tmp_path):
        raw = ds.load_delimited(write(tmp_path, "1\t0\n2\t3\n3\t0\n4\t5\n"))
        np.testing.assert_array_equal(raw.features[:, 0], [2, 4])
        assert raw.class_values == (3, 5)

    def test_comma_and_header(self, tmp_path):
        raw = ds.load_delimited(write(tmp_path, "a,b,label\n1.5,2,7\n"), header=True, drop_labels=())
        assert raw.feature_names == ("a", "b")
        assert raw.features.tolist() == [[1.5, 2.0]]

    def test_label_column_and_feature_selection(self, tmp_path):
        raw = ds.load_delimited(
            write(tmp_path, "4 1 9 8\n4 2 9 7\n"), label_column=0, feature_columns=[1, 3], drop_labels=()
        )
        assert raw.features.tolist() == [[1, 8], [2, 7]]

    def test_all_labels_dropped(self, tmp_path):
        with pytest.raises(DataError, match="empty"):
            ds.load_delimited(write(tmp_path, "1 0\n2 0\n"))

    def test_ragged_row_reports_line(self, tmp_path):
        with pytest.raises(DataError, match=":2:"):
            ds.load_delimited(write(tmp_path, "1 2 1\n3 1\n"), drop_labels=())

    def test_bad_number_reports_line(self, tmp_path):
        with pytest.raises(DataError, match=":3:"):
            ds.load_delimited(write(tmp_path, "1 2 1\n3 4 1\nx 4 1\n"), drop_labels=())

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            ds.load_delimited(tmp_path / "nope.txt")


class TestNormalize:
    def test_simple_column(self):
        out, stats = ds.normalize_minmax(series([[2.0], [4.0], [6.0]], [0, 0, 0]))
        np.testing.assert_array_equal(out.features[:, 0], [0.0, 0.5, 1.0])

    def test_unit_data_unchanged(self):
        X = np.array([[0.0, 1.0], [0.25, 0.0], [1.0, 0.5]])
        out, _ = ds.normalize_minmax(series(X, [0, 1, 0]))
        np.testing.assert_array_equal(out.features, X)

    def test_roundtrip(self):
        X = np.random.default_rng(0).normal(size=(50, 4)) * [1, 10, 100, 1e-3] + 7
        out, stats = ds.normalize_minmax(series(X, np.zeros(50)))
        np.testing.assert_allclose(stats.invert(out.features), X, rtol=0, atol=1e-12 * 100)
        assert out.features.min() >= 0 and out.features.max() <= 1

    def test_constant_feature_warns(self):
        X = np.array([[1.0, 3.0], [2.0, 3.0]])
        with pytest.warns(RuntimeWarning, match="constant"):
            out, _ = ds.normalize_minmax(series(X, [0, 0]))
        np.testing.assert_array_equal(out.features[:, 1], [0.0, 0.0])

    def test_clip_with_foreign_stats(self):
        stats = ds.MinMax(np.array([0.0]), np.array([1.0]))
        out, _ = ds.normalize_minmax(series([[-1.0], [2.0]], [0, 0]), stats, clip=True)
        np.testing.assert_array_equal(out.features[:, 0], [0.0, 1.0])

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 3)), elements=st.floats(-1e3, 1e3)))
    def test_monotone(self, X):
        stats = ds.MinMax.fit(X)
        Y = stats.apply(X)
        for j in range(X.shape[1]):
            if stats.constant[j]:
                continue
            order = np.argsort(X[:, j], kind="stable")
            assert np.all(np.diff(Y[order, j]) >= 0)


class TestWindow:
    def test_non_overlapping(self):
        raw = series(np.arange(20.0).reshape(10, 2), np.zeros(10))
        w = ds.window(raw, 5, stride=5)
        assert w.m == 2
        np.testing.assert_array_equal(w.sequences[1], raw.features[5:10])

    def test_count_formula(self):
        raw = series(np.zeros((23, 1)), np.zeros(23))
        for s, stride in [(5, 1), (5, 3), (23, 1), (7, 4)]:
            assert ds.window(raw, s, stride).m == (23 - s) // stride + 1

    def test_single_label(self):
        raw = series(np.zeros((12, 1)), np.full(12, 2))
        w = ds.window(raw, 4)
        assert set(w.labels.tolist()) == {2}

    def test_values_preserved(self):
        rng = np.random.default_rng(0)
        raw = series(rng.normal(size=(40, 3)), rng.integers(0, 3, 40))
        w = ds.window(raw, 7, stride=2)
        for i in range(w.m):
            np.testing.assert_array_equal(w.sequences[i], raw.features[w.starts[i] : w.starts[i] + 7])

    def test_majority_and_tie(self):
        labels = np.array([0, 0, 1, 1, 1, 0, 0, 1])
        raw = series(np.zeros((8, 1)), labels)
        w = ds.window(raw, 4, stride=1)
        # windows: 0011 (tie -> last=1), 0111 -> 1, 1110 -> 1, 1100 (tie -> last=0), 1001 (tie -> last=1)
        np.testing.assert_array_equal(w.labels, [1, 1, 1, 0, 1])

    def test_too_short(self):
        with pytest.raises(ConfigError):
            ds.window(series(np.zeros((3, 1)), np.zeros(3)), 5)


class TestSplit:
    def windows(self, m=100, n_classes=2):
        labels = np.repeat(np.arange(n_classes), m // n_classes)
        return ds.WindowedDataset(np.arange(m, dtype=float).reshape(m, 1, 1), labels, n_classes)

    def test_85_15(self):
        train, test = ds.split(self.windows(), 0.85)
        assert (train.m, test.m) == (85, 15)

    def test_partition_and_time_order(self):
        w = self.windows()
        train, test = ds.split(w, 0.85)
        both = np.sort(np.concatenate([train.starts, test.starts]))
        np.testing.assert_array_equal(both, w.starts)
        assert test.starts.min() >= train.starts.max()

    def test_stratified_keeps_every_class(self):
        train, test = ds.split(self.windows(100, 4), 0.85, mode="stratified")
        assert set(test.labels.tolist()) == {0, 1, 2, 3}
        assert train.m + test.m == 100
        for k in range(4):
            assert test.starts[test.labels == k].min() > train.starts[train.labels == k].max()

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            ds.split(self.windows(), 1.0)

    def test_empty_side(self):
        w = ds.WindowedDataset(np.zeros((1, 1, 1)), np.zeros(1, dtype=int), 1)
        with pytest.raises(ConfigError):
            ds.split(w, 0.5)


class TestPearson:
    def test_identical_features(self):
        x = np.random.default_rng(0).normal(size=100)
        assert ds.pearson_avg(np.column_stack([x, x])) == pytest.approx(1.0)

    def test_independent_features(self):
        X = np.random.default_rng(1).normal(size=(10_000, 2))
        assert ds.pearson_avg(X) < 0.05

    def test_matches_corrcoef(self):
        X = np.random.default_rng(2).normal(size=(200, 5)) @ np.random.default_rng(3).normal(size=(5, 5))
        r = np.corrcoef(X, rowvar=False)
        expected = np.abs(r[~np.eye(5, dtype=bool)]).mean()
        assert ds.pearson_avg(X) == pytest.approx(expected, rel=1e-12)

    def test_constant_feature(self):
        X = np.column_stack([np.arange(10.0), np.ones(10), np.arange(10.0)])
        with pytest.warns(RuntimeWarning):
            # only the (0, 2) pair correlates: 2 of 6 off-diagonal entries
            assert ds.pearson_avg(X) == pytest.approx(2 / 6)

    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(0, 10_000),
        st.lists(st.floats(0.01, 100), min_size=3, max_size=3),
        st.lists(st.floats(-100, 100), min_size=3, max_size=3),
    )
    def test_affine_invariance(self, seed, scale, shift):
        X = np.random.default_rng(seed).normal(size=(50, 3))
        X[:, 2] += X[:, 0]
        Y = X * np.array(scale) + np.array(shift)
        assert ds.pearson_avg(Y) == pytest.approx(ds.pearson_avg(X), abs=1e-9)


def test_variance_summary():
    X = np.column_stack([np.array([-1.0, 1.0]) * 1.0, np.array([-1.0, 1.0]) * np.sqrt(3.0)])
    s = ds.feature_variance_summary(X)
    np.testing.assert_allclose(s.cumulative, [0.75, 1.0])
    assert s.order.tolist() == [1, 0]
