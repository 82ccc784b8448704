import struct

import numpy as np
import pytest

from src.engine.gmm_core import CGMMParams, softplus_inverse
from src.engine.model_graph import DcgmmModel


def make_params(centroids, precisions=1.0, weights=None, precision_max=1e6) -> CGMMParams:
    """Shared float64 parameters from readable values."""
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    K, D = centroids.shape
    precisions = np.broadcast_to(np.asarray(precisions, dtype=np.float64), (K, D))
    weights = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=np.float64)
    return CGMMParams(
        logits=np.log(weights),
        centroids=centroids.copy(),
        precision_raw=softplus_inverse(precisions),
        precision_max=precision_max,
    )


def idx_bytes(images_u8: np.ndarray) -> bytes:
    n, h, w = images_u8.shape
    return struct.pack(">4I", 0x803, n, h, w) + images_u8.astype(np.uint8).tobytes()


def label_bytes(labels: np.ndarray) -> bytes:
    return struct.pack(">2I", 0x801, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()


def two_clusters(n: int, seed: int, centers=((0.0, 0.0), (3.0, 0.0)), std=0.5):
    """Points around `centers` as (n, 1, 1, 2) tensors with their cluster labels."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers)
    labels = rng.integers(len(centers), size=n)
    points = centers[labels] + std * rng.standard_normal((n, 2))
    return points.reshape(n, 1, 1, 2).astype(np.float32), labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def bar_images():
    """200 4x4 images with one bright row or column each, labels 0-7."""
    rng = np.random.default_rng(7)
    labels = rng.integers(8, size=200)
    images = np.zeros((200, 4, 4, 1), dtype=np.float32)
    for i, label in enumerate(labels):
        if label < 4:
            images[i, label, :, 0] = 1.0
        else:
            images[i, :, label - 4, 0] = 1.0
    noise = rng.uniform(0.0, 0.1, size=images.shape).astype(np.float32)
    return np.clip(images + noise, 0.0, 1.0), labels


@pytest.fixture
def deep_model():
    return DcgmmModel.from_architecture("F(2,2)-G(3)-F(2,1)-G(2)", "4x4x1", seed=3)


@pytest.fixture
def idx_files(tmp_path, bar_images):
    images, labels = bar_images
    images_path, labels_path = tmp_path / "images.idx", tmp_path / "labels.idx"
    images_path.write_bytes(idx_bytes(np.rint(images[..., 0] * 255)))
    labels_path.write_bytes(label_bytes(labels))
    return images_path, labels_path
