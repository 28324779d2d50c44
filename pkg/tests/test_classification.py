"""Tests for Dirichlet-surrogate GP classification and calibration."""

import warnings

import numpy as np
import pytest

from fmgp import classification as cls
from fmgp import data as dt
from fmgp import features as ft
from fmgp import lowrank as lr
from fmgp import regression as reg
from fmgp.errors import DataError, DomainError, ShapeError


def blob_dataset(n=600, num_classes=2, seed=0, test_n=100, recal_n=100):
    raw = dt.synth_blobs(n, num_classes=num_classes, d=2, separation=4.0,
                         seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return dt.prepare(raw, seed=seed, test_n=test_n, recal_n=recal_n)


def small_config(**overrides):
    base = dict(hidden_widths=(16, 16), output_dim=8, iterations=40,
                subset_size=2000, seed=0)
    base.update(overrides)
    return cls.ClassifierConfig(**base)


def build_classifier(labels, fmap, X, sigma_f_sq, sigma_xi_sq, alpha_eps=0.01):
    """Classifier from fixed hyperparameters, no training."""
    num_classes = int(labels.max()) + 1
    y_tilde, s_tilde_sq = cls.dirichlet_transform(labels, alpha_eps, num_classes)
    caches = cls._build_class_caches(fmap, X, y_tilde, s_tilde_sq,
                                     np.asarray(sigma_xi_sq, dtype=float), 4096)
    return cls.DirichletClassifier(fmap, sigma_f_sq, sigma_xi_sq, caches,
                                   num_classes, alpha_eps,
                                   surrogate_noise=s_tilde_sq)


class TestDirichletTransform:
    def test_unit_concentration_constants(self):
        # concentration exactly 1 gives noise log 2 and target -log(2)/2
        y_tilde, s_tilde_sq = cls.dirichlet_transform(np.array([0, 1]),
                                                      alpha_eps=1.0)
        off = y_tilde[0, 1]
        noise_off = s_tilde_sq[0, 1]
        np.testing.assert_allclose(noise_off, 0.693147, atol=1e-6)
        np.testing.assert_allclose(off, -0.346574, atol=1e-6)

    def test_exact_identities(self):
        labels = np.array([0, 2, 1, 1, 0])
        eps = 0.01
        y_tilde, s_tilde_sq = cls.dirichlet_transform(labels, eps)
        alpha = np.full((5, 3), eps)
        alpha[np.arange(5), labels] += 1.0
        np.testing.assert_array_equal(s_tilde_sq, np.log(1.0 / alpha + 1.0))
        np.testing.assert_array_equal(y_tilde, np.log(alpha) - s_tilde_sq / 2.0)

    def test_label_entry_less_noisy(self):
        y_tilde, s_tilde_sq = cls.dirichlet_transform(np.array([1]), 0.01)
        assert s_tilde_sq[0, 1] < s_tilde_sq[0, 0]
        assert y_tilde[0, 1] > y_tilde[0, 0]

    def test_rejects_bad_inputs(self):
        with pytest.raises(DomainError):
            cls.dirichlet_transform(np.array([0, 1]), alpha_eps=0.0)
        with pytest.raises(DomainError):
            cls.dirichlet_transform(np.array([0, 3]), 0.01, num_classes=2)
        with pytest.raises(ShapeError):
            cls.dirichlet_transform(np.zeros((2, 2)), 0.01)


class TestHeteroscedasticWhitening:
    def test_posteriors_match_dense_oracle(self):
        # per-class surrogate regression with per-point noise, checked
        # against the dense heteroscedastic GP oracle
        rng = np.random.default_rng(70)
        n = 120
        X = rng.standard_normal((n, 3))
        labels = rng.integers(0, 3, size=n)
        fmap = ft.init_params([3, 12, 6], seed=9, normalization="layer_norm",
                              rescale_to_unit=True)
        sigma_f_sq = np.array([1.5, 0.7, 2.2])
        sigma_xi_sq = np.array([0.3, 0.9, 0.05])
        clf = build_classifier(labels, fmap, X, sigma_f_sq, sigma_xi_sq)
        Xs = rng.standard_normal((20, 3))
        means, variances = cls.class_posteriors(clf, Xs)
        y_tilde, s_tilde_sq = cls.dirichlet_transform(labels, 0.01, 3)
        for c in range(3):
            def kernel(a, b, c=c):
                return sigma_f_sq[c] * (ft.forward(fmap, a) @ ft.forward(fmap, b).T)

            noise = s_tilde_sq[:, c] + sigma_xi_sq[c]
            oracle = reg.exact_gp_oracle(kernel, X, y_tilde[:, c], noise, Xs)
            scale = np.max(np.abs(oracle.mean))
            assert np.max(np.abs(means[:, c] - oracle.mean)) <= 1e-8 * scale
            np.testing.assert_allclose(variances[:, c], oracle.variance,
                                       atol=1e-8)

    def test_label_permutation_permutes_posterior_columns(self):
        rng = np.random.default_rng(71)
        n = 60
        X = rng.standard_normal((n, 2))
        labels = rng.integers(0, 3, size=n)
        fmap = ft.init_params([2, 8, 5], seed=10, normalization="layer_norm",
                              rescale_to_unit=True)
        shared_sf = np.full(3, 1.2)
        shared_sx = np.full(3, 0.4)
        perm = np.array([2, 0, 1])
        clf_a = build_classifier(labels, fmap, X, shared_sf, shared_sx)
        clf_b = build_classifier(perm[labels], fmap, X, shared_sf, shared_sx)
        Xs = rng.standard_normal((10, 2))
        means_a, var_a = cls.class_posteriors(clf_a, Xs)
        means_b, var_b = cls.class_posteriors(clf_b, Xs)
        np.testing.assert_allclose(means_b[:, perm], means_a, atol=1e-12)
        np.testing.assert_allclose(var_b[:, perm], var_a, atol=1e-12)


class TestFitClassifier:
    def test_end_to_end_on_blobs(self):
        ds = blob_dataset()
        clf = cls.fit_classifier(ds, small_config())
        assert len(clf.training_trace) == 40
        assert clf.training_trace[-1] < clf.training_trace[0]
        X_test, y_test = ds.subset_arrays("test")
        probs = cls.predict_proba(clf, X_test, seed=0)
        error = float(np.mean(probs.argmax(axis=1) != y_test))
        assert error <= 0.10

    def test_single_class_raises(self):
        ds = blob_dataset()
        ds.targets[:] = 0
        with pytest.raises(DomainError):
            cls.fit_classifier(ds, small_config())

    def test_per_class_parameters_present(self):
        ds = blob_dataset(num_classes=3, n=900, test_n=150, recal_n=150)
        clf = cls.fit_classifier(ds, small_config(iterations=10))
        assert clf.num_classes == 3
        assert clf.sigma_f_sq.shape == (3,)
        assert clf.sigma_xi_sq.shape == (3,)
        assert len(clf.caches) == 3

    def test_deterministic_under_seed(self):
        ds = blob_dataset()
        a = cls.fit_classifier(ds, small_config(iterations=15))
        b = cls.fit_classifier(ds, small_config(iterations=15))
        np.testing.assert_array_equal(a.sigma_f_sq, b.sigma_f_sq)
        np.testing.assert_array_equal(a.caches[0].lam, b.caches[0].lam)


class TestPredictProba:
    def setup_method(self):
        rng = np.random.default_rng(72)
        n = 80
        self.X = rng.standard_normal((n, 2))
        self.labels = rng.integers(0, 2, size=n)
        fmap = ft.init_params([2, 8, 5], seed=11, normalization="layer_norm",
                              rescale_to_unit=True)
        self.clf = build_classifier(self.labels, fmap, self.X,
                                    np.array([1.0, 1.0]), np.array([0.3, 0.3]))
        self.Xs = rng.standard_normal((25, 2))

    def test_rows_sum_to_one(self):
        probs = cls.predict_proba(self.clf, self.Xs, seed=0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs >= 0)

    def test_deterministic_per_seed(self):
        a = cls.predict_proba(self.clf, self.Xs, seed=5)
        b = cls.predict_proba(self.clf, self.Xs, seed=5)
        np.testing.assert_array_equal(a, b)
        c = cls.predict_proba(self.clf, self.Xs, seed=6)
        assert np.max(np.abs(a - c)) > 0

    def test_monte_carlo_convergence(self):
        # doubling the sample count moves each probability by at most a
        # few standard errors of the estimator
        a = cls.predict_proba(self.clf, self.Xs, num_samples=1024, seed=1)
        b = cls.predict_proba(self.clf, self.Xs, num_samples=2048, seed=2)
        se = np.sqrt(a * (1 - a) / 1024) + 1e-4
        assert np.all(np.abs(a - b) <= 5 * se)

    def test_rejects_bad_arguments(self):
        with pytest.raises(DomainError):
            cls.predict_proba(self.clf, self.Xs, num_samples=0)
        with pytest.raises(DomainError):
            cls.predict_proba(self.clf, self.Xs, temperature=0.0)


class TestTemperature:
    def test_fitted_temperature_not_worse_than_unit(self):
        ds = blob_dataset(n=900, test_n=150, recal_n=150)
        clf = cls.fit_classifier(ds, small_config())
        X_cal, y_cal = ds.subset_arrays("recalibration")
        t = cls.fit_temperature(clf, X_cal, y_cal, seed=3)
        assert t > 0
        probs_unit = cls.predict_proba(clf, X_cal, seed=4)
        probs_fit = cls.predict_proba(clf.with_temperature(t), X_cal, seed=4)
        nll_unit = cls.multinomial_nll(probs_unit, y_cal)
        nll_fit = cls.multinomial_nll(probs_fit, y_cal)
        # the same draws are reused inside the fit, so allow sampling jitter
        assert nll_fit <= nll_unit + 5e-3

    def test_argmax_invariant_under_temperature(self):
        ds = blob_dataset(n=900, test_n=150, recal_n=150)
        clf = cls.fit_classifier(ds, small_config())
        X_test, _ = ds.subset_arrays("test")
        base = cls.predict_proba(clf, X_test, seed=7)
        for t in (0.25, 1.7, 4.0):
            scaled = cls.predict_proba(clf.with_temperature(t), X_test, seed=7)
            np.testing.assert_array_equal(base.argmax(axis=1),
                                          scaled.argmax(axis=1))

    def test_single_class_holdout_warns_and_keeps(self):
        rng = np.random.default_rng(73)
        X = rng.standard_normal((30, 2))
        labels = rng.integers(0, 2, size=30)
        fmap = ft.init_params([2, 6, 4], seed=12, rescale_to_unit=True)
        clf = build_classifier(labels, fmap, X, np.ones(2), np.full(2, 0.5))
        with pytest.warns(UserWarning):
            t = cls.fit_temperature(clf, X[:5], np.zeros(5, dtype=int))
        assert t == clf.temperature

    def test_nonpositive_temperature_rejected(self):
        rng = np.random.default_rng(74)
        X = rng.standard_normal((10, 2))
        labels = np.array([0, 1] * 5)
        fmap = ft.init_params([2, 4, 3], seed=13, rescale_to_unit=True)
        clf = build_classifier(labels, fmap, X, np.ones(2), np.ones(2))
        with pytest.raises(DomainError):
            clf.with_temperature(0.0)


class TestComputeEce:
    def test_perfectly_calibrated_and_correct(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        labels = np.array([0, 1, 0])
        report = cls.compute_ece(probs, labels)
        assert report.ece == 0.0

    def test_two_confident_wrong_predictions(self):
        # both points land in one bin with confidence 0.8 and accuracy 0
        probs = np.array([[0.8, 0.2], [0.8, 0.2]])
        labels = np.array([1, 1])
        report = cls.compute_ece(probs, labels)
        np.testing.assert_allclose(report.ece, 0.8, rtol=1e-12)

    def test_bounded_by_unit_interval(self):
        rng = np.random.default_rng(75)
        logits = rng.standard_normal((200, 3))
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        labels = rng.integers(0, 3, size=200)
        report = cls.compute_ece(probs, labels)
        assert 0.0 <= report.ece <= 1.0
        assert report.bin_counts.sum() == 200

    def test_bin_boundaries_are_left_open(self):
        # confidence exactly at an interior edge belongs to the lower bin
        num_bins = 15
        probs = np.array([[1.0 / num_bins, 1.0 - 1.0 / num_bins]])
        # confidence is the max, 14/15, exactly the right edge of bin 13
        report = cls.compute_ece(probs, np.array([1]), num_bins=num_bins)
        assert report.bin_counts[13] == 1
        assert report.bin_counts[14] == 0

    def test_empty_input_raises(self):
        with pytest.raises(DomainError):
            cls.compute_ece(np.empty((0, 2)), np.empty(0, dtype=int))


class TestPersistence:
    def test_round_trip_probabilities(self, tmp_path):
        rng = np.random.default_rng(76)
        X = rng.standard_normal((40, 2))
        labels = rng.integers(0, 3, size=40)
        fmap = ft.init_params([2, 6, 4], seed=14, normalization="layer_norm",
                              rescale_to_unit=True)
        clf = build_classifier(labels, fmap, X, np.array([1.0, 1.5, 0.8]),
                               np.array([0.2, 0.3, 0.4]))
        clf = clf.with_temperature(1.37)
        path = tmp_path / "clf.json"
        cls.save_classifier(clf, path)
        loaded = cls.load_classifier(path)
        assert loaded.temperature == clf.temperature
        assert loaded.alpha_eps == clf.alpha_eps
        Xs = rng.standard_normal((12, 2))
        np.testing.assert_array_equal(cls.predict_proba(clf, Xs, seed=8),
                                      cls.predict_proba(loaded, Xs, seed=8))

    def test_regression_schema_rejected(self):
        with pytest.raises(DataError):
            cls.classifier_from_json_dict({"schema": reg.MODEL_SCHEMA,
                                           "task": "regression"})
