import numpy as np
import pytest
from conftest import two_clusters
from scipy.stats import multivariate_normal
from sklearn.metrics import roc_auc_score
from sklearn.mixture import GaussianMixture

from src.engine import evaluation
from src.engine.errors import ConfigurationError, UsageError
from src.engine.evaluation import em_fit, export_alphabet, roc_from_scores
from src.engine.model_graph import DcgmmModel


class TestRoc:
    def test_separated_scores(self):
        curve = roc_from_scores([1.0, 2.0, 3.0], [-2.0, -1.0])
        assert curve.auc == pytest.approx(1.0)
        assert curve.kept_inlier[0] == 1.0 and curve.rejected_outlier[0] == 0.0
        assert curve.kept_inlier[-1] == 0.0 and curve.rejected_outlier[-1] == 1.0

    def test_reversed_scores(self):
        assert roc_from_scores([-2.0, -1.0], [1.0, 2.0]).auc == pytest.approx(0.0)

    def test_identical_scores(self):
        assert roc_from_scores([0.0, 1.0], [0.0, 1.0]).auc == pytest.approx(0.5)

    def test_matches_rank_statistic(self, rng):
        inliers = rng.normal(1.0, 1.0, 300).round(1)
        outliers = rng.normal(0.0, 1.0, 200).round(1)
        labels = np.r_[np.ones(300), np.zeros(200)]
        expected = roc_auc_score(labels, np.r_[inliers, outliers])
        assert roc_from_scores(inliers, outliers).auc == pytest.approx(expected, abs=1e-9)

    def test_monotone_transform_and_swap(self, rng):
        inliers, outliers = rng.normal(0.5, 1.0, 100), rng.normal(0.0, 1.0, 80)
        base = roc_from_scores(inliers, outliers).auc
        assert roc_from_scores(np.exp(inliers), np.exp(outliers)).auc == pytest.approx(base, abs=1e-12)
        assert roc_from_scores(outliers, inliers).auc == pytest.approx(1.0 - base, abs=1e-6)

    def test_same_set_is_chance(self, rng):
        scores = rng.normal(size=500)
        assert roc_from_scores(scores, scores).auc == pytest.approx(0.5, abs=0.02)

    def test_frame(self):
        frame = roc_from_scores([1.0, 2.0], [0.0]).to_frame()
        assert list(frame.columns) == ["threshold", "kept_inlier", "rejected_outlier"]
        assert frame["threshold"].iloc[0] == -np.inf

    def test_empty(self):
        with pytest.raises(ValueError):
            roc_from_scores([], [1.0])


class TestModelEvaluation:
    def test_outlier_roc_on_model(self, deep_model, bar_images):
        images, _ = bar_images
        noise = np.random.default_rng(0).uniform(size=(50, 4, 4, 1)).astype(np.float32)
        curve = evaluation.outlier_roc(deep_model, None, images[:50], noise)
        assert 0.0 <= curve.auc <= 1.0
        with pytest.raises(ConfigurationError):
            evaluation.outlier_roc(deep_model, 3, images[:50], noise)

    def test_layerwise(self, deep_model, bar_images):
        images, _ = bar_images
        noise = np.random.default_rng(0).uniform(size=(50, 4, 4, 1)).astype(np.float32)
        table = evaluation.layerwise_auc(deep_model, images[:50], noise)
        assert list(table["layer"]) == [2, 4]
        assert list(table["token"]) == ["G(3)", "G(2)"]

    def test_accuracy_needs_classifier(self, deep_model, bar_images):
        with pytest.raises(UsageError):
            evaluation.classification_accuracy(deep_model, bar_images[0])


class TestEm:
    def test_recovers_clusters(self):
        points, _ = two_clusters(4000, seed=5)
        fit = em_fit(points.reshape(-1, 2), 2, seed=0)
        order = np.argsort(fit.means[:, 0])
        np.testing.assert_allclose(fit.means[order], [[0.0, 0.0], [3.0, 0.0]], atol=0.05)
        np.testing.assert_allclose(fit.variances, 0.25, atol=0.03)
        np.testing.assert_allclose(fit.weights, 0.5, atol=0.05)
        assert fit.converged

    def test_log_likelihood_matches_library_fit(self):
        points, _ = two_clusters(2000, seed=6)
        X = points.reshape(-1, 2).astype(np.float64)
        fit = em_fit(X, 2, seed=0)
        reference = GaussianMixture(2, covariance_type="diag", random_state=0).fit(X)
        assert fit.log_likelihood == pytest.approx(reference.score(X), abs=5e-3)

    def test_needs_enough_data(self):
        with pytest.raises(ValueError):
            em_fit(np.zeros((2, 3)), 3)

    def test_two_point_data_collapses_onto_the_points(self):
        X = np.repeat([[0.0, 0.0], [1.0, 2.0]], 50, axis=0)
        fit = em_fit(X, 2, seed=0)
        order = np.argsort(fit.means[:, 0])
        np.testing.assert_allclose(fit.means[order], [[0.0, 0.0], [1.0, 2.0]], atol=1e-12)
        np.testing.assert_allclose(fit.weights, 0.5, atol=1e-12)
        np.testing.assert_allclose(evaluation.em_oracle(X, 2, seed=0).precisions, 1e6, rtol=1e-9)

    def test_single_component_is_closed_form(self, rng):
        X = rng.normal([1.0, -2.0, 0.5], [0.5, 2.0, 1.0], size=(300, 3))
        fit = em_fit(X, 1, seed=0)
        np.testing.assert_allclose(fit.means[0], X.mean(axis=0), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(fit.variances[0], X.var(axis=0), rtol=1e-10)
        np.testing.assert_array_equal(fit.weights, [1.0])
        expected = multivariate_normal(X.mean(axis=0), np.diag(X.var(axis=0))).logpdf(X).mean()
        assert fit.log_likelihood == pytest.approx(expected, rel=1e-10)

    def test_oracle_params(self):
        points, _ = two_clusters(1000, seed=7)
        fit = em_fit(points.reshape(-1, 2), 2, seed=0)
        params = evaluation.em_oracle(points.reshape(-1, 2), 2, seed=0)
        np.testing.assert_allclose(params.weights, fit.weights)
        np.testing.assert_allclose(params.precisions, 1.0 / fit.variances, rtol=1e-9)


class TestAlphabet:
    def test_unfolds_centroids(self, deep_model):
        sheet = export_alphabet(deep_model, 2)
        centroids = deep_model.layer(2).params.centroids
        assert sheet.patches.shape == (3, 2, 2, 1) and sheet.K == 3
        np.testing.assert_array_equal(sheet.patches[:, :, :, 0].reshape(3, 4), centroids)

    def test_multichannel_input(self, deep_model):
        sheet = export_alphabet(deep_model, 4)
        assert sheet.patches.shape == (2, 2, 2, 3)
        np.testing.assert_array_equal(sheet.patches.reshape(2, -1), deep_model.layer(4).params.centroids)

    def test_needs_folding_feed(self):
        model = DcgmmModel.from_architecture("F(2,1)-P(2,2)-G(3)", "6x6x1", seed=0)
        with pytest.raises(ConfigurationError):
            export_alphabet(model, 3)
        with pytest.raises(ConfigurationError):
            export_alphabet(model, 1)
