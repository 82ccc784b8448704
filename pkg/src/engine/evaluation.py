"""
Model evaluation: outlier ROC curves and AUC, visual-alphabet export,
classification accuracy and a diagonal-covariance EM reference fit.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus
from sklearn.metrics import auc

from ..models.schemas import LayerKind
from . import layers as L
from .errors import ConfigurationError, UsageError
from .gmm_core import LOG_2PI, CGMMParams, softplus_inverse
from .model_graph import DcgmmModel
from .training import DataLike, _split, predict_classes, score_samples

logger = logging.getLogger(__name__)

VARIANCE_MIN = 1e-6
VARIANCE_MAX = 1e4


@dataclass
class RocCurve:
    thresholds: np.ndarray
    kept_inlier: np.ndarray
    rejected_outlier: np.ndarray
    auc: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"threshold": self.thresholds, "kept_inlier": self.kept_inlier, "rejected_outlier": self.rejected_outlier}
        )


def roc_from_scores(inlier_scores, outlier_scores) -> RocCurve:
    """
    Sweeps a threshold tau over every distinct score plus -inf and +inf.
    Inliers are kept when score >= tau, outliers rejected when score < tau.
    """
    inliers = np.sort(np.asarray(inlier_scores, dtype=np.float64).ravel())
    outliers = np.sort(np.asarray(outlier_scores, dtype=np.float64).ravel())
    if inliers.size == 0 or outliers.size == 0:
        raise ValueError("ROC needs non-empty inlier and outlier score sets")
    thresholds = np.unique(np.concatenate([[-np.inf], inliers, outliers, [np.inf]]))
    kept = 1.0 - np.searchsorted(inliers, thresholds, side="left") / inliers.size
    rejected = np.searchsorted(outliers, thresholds, side="left") / outliers.size
    # inf thresholds keep nothing regardless of ties at +inf scores
    kept[-1], rejected[-1] = 0.0, 1.0
    return RocCurve(thresholds=thresholds, kept_inlier=kept, rejected_outlier=rejected, auc=float(auc(rejected, kept)))


def _check_cgmm(model: DcgmmModel, layer: Optional[int]) -> int:
    index = model.top_cgmm_index if layer is None else layer
    if model.layer(index).kind != LayerKind.CGMM:
        raise ConfigurationError(f"layer {index} is not a cGMM layer")
    return index


def outlier_roc(
    model: DcgmmModel, layer: Optional[int], inliers: DataLike, outliers: DataLike, batch_size: Optional[int] = None
) -> RocCurve:
    """ROC of the per-sample loss of cGMM `layer` (default: topmost)."""
    index = _check_cgmm(model, layer)
    inlier_scores = score_samples(model, inliers, batch_size)[index]
    outlier_scores = score_samples(model, outliers, batch_size)[index]
    curve = roc_from_scores(inlier_scores, outlier_scores)
    logger.info("layer %d outlier AUC %.4f (%d inliers, %d outliers)", index, curve.auc, len(inlier_scores), len(outlier_scores))
    return curve


def layerwise_auc(model: DcgmmModel, inliers: DataLike, outliers: DataLike, batch_size: Optional[int] = None) -> pd.DataFrame:
    inlier_scores = score_samples(model, inliers, batch_size)
    outlier_scores = score_samples(model, outliers, batch_size)
    rows = [
        {
            "layer": index,
            "token": model.layer(index).spec.token,
            "auc": roc_from_scores(inlier_scores[index], outlier_scores[index]).auc,
        }
        for index in model.cgmm_indices
    ]
    return pd.DataFrame(rows, columns=["layer", "token", "auc"])


def classification_accuracy(model: DcgmmModel, dataset: DataLike, batch_size: Optional[int] = None) -> float:
    if model.classifier is None:
        raise UsageError("model has no classifier layer")
    images, labels = _split(dataset)
    if labels is None:
        raise UsageError("accuracy needs labelled data")
    return float(np.mean(predict_classes(model, images, batch_size) == labels))


# --- EM reference -----------------------------------------------------------

@dataclass
class EmFit:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool

    def to_params(self) -> CGMMParams:
        return CGMMParams(
            logits=np.log(self.weights),
            centroids=self.means.copy(),
            precision_raw=softplus_inverse(1.0 / self.variances),
        )


def _em_log_joint(X, weights, means, variances) -> np.ndarray:
    diff = X[:, None, :] - means[None, :, :]
    maha = np.sum(diff * diff / variances[None], axis=2)
    log_det = np.sum(np.log(variances), axis=1)
    return np.log(weights)[None, :] - 0.5 * (X.shape[1] * LOG_2PI + log_det[None, :] + maha)


def em_fit(data, K: int, iterations: int = 200, tol: float = 1e-8, seed: int = 0) -> EmFit:
    """
    Diagonal-covariance EM with k-means++ seeding. Variances are clamped to
    [1e-6, 1e4]; a component that loses all responsibility is re-seeded at a
    random datum.
    """
    X = np.asarray(data, dtype=np.float64)
    X = X.reshape(len(X), -1)
    n, D = X.shape
    if n < K:
        raise ValueError(f"EM needs at least K={K} data vectors, got {n}")
    rng = np.random.default_rng(seed)
    means, _ = kmeans_plusplus(X, K, random_state=seed)
    variances = np.tile(np.clip(X.var(axis=0), VARIANCE_MIN, VARIANCE_MAX), (K, 1))
    weights = np.full(K, 1.0 / K)

    prev_ll, converged, it = None, False, 0
    for it in range(1, iterations + 1):
        lj = _em_log_joint(X, weights, means, variances)
        lse = logsumexp(lj, axis=1, keepdims=True)
        ll = float(np.mean(lse))
        r = np.exp(lj - lse)

        Nk = r.sum(axis=0)
        empty = Nk < 1e-10 * n
        for k in np.flatnonzero(empty):
            logger.debug("EM iteration %d: re-seeding empty component %d", it, k)
            means[k] = X[rng.integers(n)]
            variances[k] = np.clip(X.var(axis=0), VARIANCE_MIN, VARIANCE_MAX)
        live = ~empty
        means[live] = (r[:, live].T @ X) / Nk[live, None]
        for k in np.flatnonzero(live):
            d = X - means[k]
            variances[k] = (r[:, k] @ (d * d)) / Nk[k]
        variances = np.clip(variances, VARIANCE_MIN, VARIANCE_MAX)
        weights = np.where(empty, 1.0 / K, Nk / n)
        weights = weights / weights.sum()

        if prev_ll is not None and abs(ll - prev_ll) <= tol * max(abs(ll), 1.0):
            converged = True
            break
        prev_ll = ll

    final = float(np.mean(logsumexp(_em_log_joint(X, weights, means, variances), axis=1)))
    return EmFit(weights=weights, means=means, variances=variances, log_likelihood=final, iterations=it, converged=converged)


def em_oracle(data, K: int, iterations: int = 200, seed: int = 0) -> CGMMParams:
    """EM reference parameters in the same form SGD training produces."""
    return em_fit(data, K, iterations=iterations, seed=seed).to_params()


# --- visual alphabet --------------------------------------------------------

@dataclass
class AlphabetSheet:
    layer: int
    kernel: int
    patches: np.ndarray  # (K, f, f, C)

    @property
    def K(self) -> int:
        return self.patches.shape[0]


def export_alphabet(model: DcgmmModel, cgmm_layer: int, position: tuple[int, int] = (0, 0)) -> AlphabetSheet:
    """Un-folds every centroid of a folding-fed cGMM into an f x f x C patch."""
    layer = model.layer(cgmm_layer)
    if layer.kind != LayerKind.CGMM:
        raise ConfigurationError(f"layer {cgmm_layer} is not a cGMM layer")
    if cgmm_layer == 1 or model.layer(cgmm_layer - 1).kind != LayerKind.FOLDING:
        raise ConfigurationError(f"cGMM layer {cgmm_layer} is not fed by a folding layer")
    folding = model.layer(cgmm_layer - 1)
    f, stride, C = folding.spec.kernel, folding.spec.stride, folding.input_shape.C
    centroids = layer.params.at(*position).centroids.astype(np.float32)

    patches = np.zeros((centroids.shape[0], f, f, C), dtype=np.float32)
    for c in range(centroids.shape[1]):
        h, w, cc = L.folding_source_index(f, stride, C, (0, 0, c))
        patches[:, h, w, cc] = centroids[:, c]
    return AlphabetSheet(layer=cgmm_layer, kernel=f, patches=patches)
