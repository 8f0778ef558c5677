import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dimrobust import transforms as tf
from dimrobust.errors import ConfigError

from oracles import naive_candles, naive_ema


def variance_grid_direction(X, step_deg=1.0):
    """Brute-force the unit direction of maximal projected variance in 2-D."""
    Xc = X - X.mean(axis=0)
    best, best_dir = -1.0, None
    for deg in np.arange(0.0, 180.0, step_deg):
        u = np.array([np.cos(np.radians(deg)), np.sin(np.radians(deg))])
        v = np.var(Xc @ u)
        if v > best:
            best, best_dir = v, u
    return best_dir


class TestPCA:
    def test_axis_aligned(self):
        rng = np.random.default_rng(0)
        # exact variances 4, 1, 0 along axes 1, 2, 0 (ddof=1 over the +-pattern)
        n = 1000
        pattern = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        other = np.roll(pattern, 1) * np.where(np.arange(n) % 4 < 2, 1.0, -1.0)
        X = np.column_stack([np.zeros(n), 2.0 * pattern, other])
        X -= X.mean(axis=0)
        X *= np.sqrt((n - 1) / n)
        t = tf.pca_fit(X, 2)
        np.testing.assert_allclose(np.abs(t.components), [[0, 1, 0], [0, 0, 1]], atol=1e-9)
        np.testing.assert_allclose(t.explained_variance, [4.0, 1.0], rtol=1e-9)
        assert np.all(t.components.max(axis=1) > 0)
        del rng

    @pytest.mark.parametrize("frac,p", [(0.27, 6), (0.50, 11), (0.81, 18)])
    def test_component_fractions_for_22_features(self, frac, p):
        assert tf.component_count(frac, 22) == p

    def test_first_component_matches_grid_search(self):
        rng = np.random.default_rng(1)
        cov = np.array([[3.0, 1.2], [1.2, 1.0]])
        X = rng.multivariate_normal([0.3, -1.0], cov, size=5000)
        u = variance_grid_direction(X)
        t = tf.pca_fit(X, 1)
        assert abs(float(t.components[0] @ u)) >= 0.999

    def test_full_rank_reconstruction(self):
        X = np.random.default_rng(2).normal(size=(300, 6)) @ np.random.default_rng(3).normal(size=(6, 6))
        t = tf.pca_fit(X, 6)
        assert np.mean((t.reconstruct(tf.pca_apply(t, X)) - X) ** 2) <= 1e-10

    def test_mean_maps_to_zero(self):
        X = np.random.default_rng(4).normal(size=(100, 4))
        t = tf.pca_fit(X, 3)
        np.testing.assert_allclose(tf.pca_apply(t, t.mean[None, :]), 0.0, atol=1e-15)

    def test_projected_variance_equals_explained(self):
        X = np.random.default_rng(5).normal(size=(400, 5)) @ np.diag([5, 3, 2, 1, 0.5])
        t = tf.pca_fit(X, 5)
        Z = tf.pca_apply(t, X)
        np.testing.assert_allclose(Z.var(axis=0, ddof=1), t.explained_variance, rtol=1e-8)
        cov = np.cov(Z, rowvar=False)
        assert np.abs(cov - np.diag(np.diag(cov))).max() <= 1e-6

    def test_orthonormal_and_sorted(self):
        X = np.random.default_rng(6).normal(size=(200, 8)) @ np.random.default_rng(7).normal(size=(8, 8))
        t = tf.pca_fit(X, 8)
        assert np.linalg.norm(t.components @ t.components.T - np.eye(8)) <= 1e-8
        assert np.all(np.diff(t.explained_variance) <= 0)

    def test_reconstruction_error_non_increasing(self):
        X = np.random.default_rng(8).normal(size=(200, 6)) @ np.random.default_rng(9).normal(size=(6, 6))
        errs = []
        for p in range(1, 7):
            t = tf.pca_fit(X, p)
            errs.append(np.mean((t.reconstruct(tf.pca_apply(t, X)) - X) ** 2))
        assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))

    def test_bad_p(self):
        with pytest.raises(ConfigError):
            tf.pca_fit(np.zeros((10, 3)), 4)
        with pytest.raises(ConfigError):
            tf.pca_fit(np.zeros((10, 3)), 0)

    def test_dimension_mismatch(self):
        t = tf.pca_fit(np.random.default_rng(0).normal(size=(10, 3)), 2)
        with pytest.raises(ConfigError):
            tf.pca_apply(t, np.zeros((4, 2)))

    def test_rescaled_output_in_unit_box(self):
        X = np.random.default_rng(10).normal(size=(100, 4))
        t = tf.pca_fit(X, 2, rescale=True)
        Z = t.apply(X)
        assert Z.min() == 0.0 and Z.max() == 1.0
        Zt = t.apply(np.random.default_rng(11).normal(size=(50, 4)) * 3)
        assert Zt.min() >= 0.0 and Zt.max() <= 1.0


class TestVarianceSelection:
    def test_equal_variances(self):
        X = np.random.default_rng(0).choice([-1.0, 1.0], size=(1000, 4))
        X = X / X.std(axis=0)
        assert tf.intrinsic_dimension(X, 0.5) == 2

    def test_low_variance_mask(self):
        X = np.column_stack(
            [np.tile([-1.0, 1.0], 50) * np.sqrt(8), np.tile([-1.0, 1.0], 50), np.tile([1.0, -1.0], 50)]
        )
        assert tf.low_variance_select(X, 0.8).indices == (0,)

    def test_ratio_one_keeps_everything(self):
        X = np.random.default_rng(1).normal(size=(50, 5))
        assert tf.low_variance_select(X, 1.0).indices == (0, 1, 2, 3, 4)

    def test_pca_mode_counts_eigenvalues(self):
        rng = np.random.default_rng(2)
        latent = rng.normal(size=(2000, 1))
        X = np.hstack([latent, latent, latent]) + rng.normal(scale=0.01, size=(2000, 3))
        assert tf.intrinsic_dimension(X, 0.9, mode="feature") == 3
        assert tf.intrinsic_dimension(X, 0.9, mode="pca") == 1

    def test_bad_ratio(self):
        with pytest.raises(ConfigError):
            tf.intrinsic_dimension(np.zeros((3, 2)), 0.0)


class TestMask:
    def test_all_columns(self):
        X = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(tf.mask_apply(tf.FeatureMask((0, 1, 2)), X), X)

    def test_single_column(self):
        X = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tf.mask_apply(tf.FeatureMask((1,)), X), [[2.0], [4.0]])

    def test_nested_masks_compose(self):
        X = np.random.default_rng(1).normal(size=(4, 8))
        outer = tf.FeatureMask((1, 3, 4, 6, 7))
        inner = tf.FeatureMask((0, 2, 4))
        composed = tf.FeatureMask(tuple(outer.indices[i] for i in inner.indices))
        np.testing.assert_array_equal(
            tf.mask_apply(inner, tf.mask_apply(outer, X)), tf.mask_apply(composed, X)
        )

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            tf.mask_apply(tf.FeatureMask((3,)), np.zeros((2, 3)))

    def test_empty_mask(self):
        with pytest.raises(ConfigError):
            tf.FeatureMask(())


class TestCandlestick:
    def test_single_window(self):
        out = tf.candlestick_ohlc(np.array([[1.0], [3.0], [0.0], [2.0]]), 4)
        np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0, 0.0]])

    def test_constant_series(self):
        out = tf.candlestick_ohlc(np.full((40, 2), 0.3), 8)
        assert np.all(out == 0.3)

    def test_matches_naive_scan(self):
        X = np.random.default_rng(0).uniform(size=(1000, 3))
        np.testing.assert_array_equal(tf.candlestick_ohlc(X, 20), naive_candles(X, 20))

    def test_trailing_rows_dropped(self):
        assert tf.candlestick_ohlc(np.zeros((43, 2)), 10).shape == (4, 8)

    def test_ordering_invariant(self):
        X = np.random.default_rng(1).uniform(size=(200, 4))
        c = tf.candlestick_ohlc(X, 5).reshape(-1, 4, 4)
        o, cl, hi, lo = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
        assert np.all(lo <= np.minimum(o, cl))
        assert np.all(np.maximum(o, cl) <= hi)

    def test_window_too_small(self):
        with pytest.raises(ConfigError):
            tf.Candlestick(3)

    def test_too_few_rows(self):
        with pytest.raises(ConfigError):
            tf.candlestick_ohlc(np.zeros((5, 1)), 20)

    def test_fit_renormalises_train_to_unit_range(self):
        X = np.random.default_rng(2).uniform(0.2, 0.7, size=(400, 2))
        t = tf.candlestick_fit(X, 20)
        out = t.apply(X)
        np.testing.assert_allclose(out.min(axis=0), 0.0)
        np.testing.assert_allclose(out.max(axis=0), 1.0)


class TestEMA:
    def test_alpha_for_window_20(self):
        assert tf.EMA(20).alpha == pytest.approx(2 / 21)
        assert tf.EMA(20).alpha == pytest.approx(0.095238, abs=1e-6)

    def test_constant_fixed_point(self):
        X = np.full((30, 2), 0.42)
        np.testing.assert_array_equal(tf.ema_apply(tf.EMA(20), X), X)

    def test_hand_unrolled(self):
        X = np.arange(10.0)[:, None]
        expected = [0.0]
        for v in range(1, 10):
            expected.append(0.5 * v + 0.5 * expected[-1])
        # window 3 gives alpha 0.5
        np.testing.assert_allclose(tf.ema_apply(tf.EMA(3), X)[:, 0], expected, rtol=0, atol=1e-12)

    def test_matches_naive_recurrence(self):
        X = np.random.default_rng(0).uniform(size=(300, 4))
        np.testing.assert_allclose(tf.ema_apply(tf.EMA(20), X), naive_ema(X, 2 / 21), rtol=0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 40))
    def test_output_within_input_range(self, seed, window):
        X = np.random.default_rng(seed).normal(size=(60, 3))
        Y = tf.ema_apply(tf.EMA(window), X)
        assert np.all(Y >= X.min(axis=0) - 1e-12) and np.all(Y <= X.max(axis=0) + 1e-12)

    def test_idempotent_only_for_constant(self):
        t = tf.EMA(5)
        const = np.full((20, 1), 0.7)
        np.testing.assert_allclose(t.apply(t.apply(const)), t.apply(const))
        ramp = np.linspace(0, 1, 20)[:, None]
        assert not np.allclose(t.apply(t.apply(ramp)), t.apply(ramp))


class TestSerialisation:
    @pytest.mark.parametrize(
        "t",
        [
            tf.Identity(),
            tf.FeatureMask((4, 1)),
            tf.Candlestick(20, np.zeros(8), np.ones(8)),
            tf.EMA(20),
        ],
    )
    def test_roundtrip(self, tmp_path, t):
        t.save(tmp_path / "t.json")
        back = tf.load_transform(tmp_path / "t.json")
        assert back.to_dict() == t.to_dict()

    def test_pca_roundtrip_applies_identically(self, tmp_path):
        X = np.random.default_rng(0).normal(size=(50, 4))
        t = tf.pca_fit(X, 3, rescale=True)
        t.save(tmp_path / "p.json")
        back = tf.load_transform(tmp_path / "p.json")
        assert back.apply(X).tobytes() == t.apply(X).tobytes()

    def test_apply_does_not_mutate(self):
        X = np.random.default_rng(1).uniform(size=(40, 3))
        t = tf.candlestick_fit(X, 4)
        before = t.to_dict()
        t.apply(X)
        assert t.to_dict() == before


class TestDimensionReport:
    def test_identity_codimension(self):
        assert tf.dimension_report(tf.Identity(), 22, intrinsic=9).codimension == 13

    def test_pca_codimension(self):
        t = tf.PCA(np.zeros(22), np.eye(22)[:11], np.ones(11))
        assert tf.dimension_report(t, 22, intrinsic=9).codimension == 2

    def test_candlestick_width(self):
        r = tf.dimension_report(tf.Candlestick(20), 22, intrinsic=9)
        assert r.d_prime == 88 and r.rows_per_step == 20

    def test_from_training_data(self):
        X = np.random.default_rng(0).normal(size=(100, 4)) * [10, 1, 1, 1]
        r = tf.dimension_report(tf.EMA(20), 4, X, target_ratio=0.5)
        assert r.intrinsic == 1 and r.d_prime == 4
