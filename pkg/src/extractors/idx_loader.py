"""
Image dataset ingestion.

Reads MNIST-style IDX files (optionally gzipped) and the raw-tensor sidecar
format used for colour data, and filters datasets by class.

IDX images:  >u4 magic 0x00000803, >u4 N, >u4 H, >u4 W, then N*H*W ubytes
IDX labels:  >u4 magic 0x00000801, >u4 N, then N ubytes
Raw tensor:  b"DCT0", >u4 N, H, W, C, then N*H*W*C <f4 values
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import pandas as pd

from ..engine.errors import IngestionError
from ..engine.tensor_core import Shape3

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
RAW_MAGIC = b"DCT0"

PathLike = Union[str, Path]


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise IngestionError(f"images must be NHWC, got {self.images.ndim} dimensions")
        if len(self.labels) != len(self.images):
            raise IngestionError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> Shape3:
        return Shape3(*self.images.shape[1:])

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, index) -> "Dataset":
        return Dataset(images=self.images[index], labels=self.labels[index])


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except (OSError, EOFError) as e:
        raise IngestionError(f"cannot read {path}: {e}") from e


def _header(blob: bytes, count: int, path: PathLike) -> tuple[int, ...]:
    if len(blob) < 4 * count:
        raise IngestionError(f"{path}: file too short for an IDX header")
    return struct.unpack(f">{count}I", blob[: 4 * count])


def read_idx_images(path: PathLike) -> np.ndarray:
    blob = _read_bytes(path)
    magic, n, h, w = _header(blob, 4, path)
    if magic != IMAGE_MAGIC:
        raise IngestionError(f"{path}: bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    expected = n * h * w
    if len(blob) - 16 < expected:
        raise IngestionError(f"{path}: truncated payload, expected {expected} pixels, found {len(blob) - 16}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=16)
    return (pixels.astype(np.float32) / np.float32(255.0)).reshape(n, h, w, 1)


def read_idx_labels(path: PathLike) -> np.ndarray:
    blob = _read_bytes(path)
    magic, n = _header(blob, 2, path)
    if magic != LABEL_MAGIC:
        raise IngestionError(f"{path}: bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    if len(blob) - 8 < n:
        raise IngestionError(f"{path}: truncated payload, expected {n} labels, found {len(blob) - 8}")
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path: PathLike, labels_path: Optional[PathLike] = None) -> Dataset:
    """Loads an IDX image file (pixels scaled to [0, 1]) and its label file."""
    images = read_idx_images(images_path)
    if labels_path is None:
        labels = np.zeros(len(images), dtype=np.int64)
    else:
        labels = read_idx_labels(labels_path)
        if len(labels) != len(images):
            raise IngestionError(f"{labels_path} holds {len(labels)} labels but {images_path} holds {len(images)} images")
    logger.info("loaded %d images of %dx%d from %s", len(images), images.shape[1], images.shape[2], images_path)
    return Dataset(images=images, labels=labels)


def quantize(images: np.ndarray) -> np.ndarray:
    """8-bit quantization: rint(clip(x, 0, 1) * 255)."""
    return np.rint(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: Optional[PathLike] = None) -> None:
    if dataset.images.shape[3] != 1:
        raise IngestionError("IDX image files hold single-channel images only")
    n, h, w, _ = dataset.images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, n, h, w) + quantize(dataset.images).tobytes())
    if labels_path is not None:
        Path(labels_path).write_bytes(struct.pack(">2I", LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def write_raw_tensor(images: np.ndarray, path: PathLike) -> None:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise IngestionError("raw tensors are NHWC")
    Path(path).write_bytes(RAW_MAGIC + struct.pack(">4I", *images.shape) + images.astype("<f4").tobytes())


def load_raw_tensor(path: PathLike, labels_path: Optional[PathLike] = None) -> Dataset:
    blob = _read_bytes(path)
    if blob[:4] != RAW_MAGIC:
        raise IngestionError(f"{path}: not a raw tensor file")
    if len(blob) < 20:
        raise IngestionError(f"{path}: file too short for a raw tensor header")
    n, h, w, c = struct.unpack(">4I", blob[4:20])
    count = n * h * w * c
    if len(blob) - 20 < 4 * count:
        raise IngestionError(f"{path}: truncated payload, expected {count} values")
    images = np.frombuffer(blob, dtype="<f4", count=count, offset=20).astype(np.float32).reshape(n, h, w, c)
    if not np.all(np.isfinite(images)) or images.min(initial=0.0) < 0.0 or images.max(initial=0.0) > 1.0:
        raise IngestionError(f"{path}: values must be finite and lie in [0, 1]")
    labels = np.zeros(n, dtype=np.int64) if labels_path is None else read_idx_labels(labels_path)
    if len(labels) != n:
        raise IngestionError(f"{labels_path} holds {len(labels)} labels but {path} holds {n} images")
    return Dataset(images=images, labels=labels)


def load_dataset(images_path: PathLike, labels_path: Optional[PathLike] = None) -> Dataset:
    """Dispatches on file content: raw tensor sidecar or IDX."""
    blob_head = _read_bytes(images_path)[:4]
    if blob_head == RAW_MAGIC:
        return load_raw_tensor(images_path, labels_path)
    return load_idx(images_path, labels_path)


def parse_class_set(text: Optional[str]) -> Optional[list[int]]:
    """'1-9' -> [1..9], '0,3,5' -> [0, 3, 5]; None or '' -> None."""
    if text is None or not str(text).strip():
        return None
    classes = set()
    for part in str(text).split(","):
        part = part.strip()
        try:
            if "-" in part:
                lo, hi = (int(p) for p in part.split("-"))
                if lo > hi:
                    raise ValueError
                classes.update(range(lo, hi + 1))
            else:
                classes.add(int(part))
        except ValueError:
            raise IngestionError(f"cannot parse class set '{text}'") from None
    return sorted(classes)


def filter_classes(ds: Dataset, keep: Iterable[int], per_class_cap: Optional[int] = None) -> Dataset:
    """Stable-ordered subset of the kept classes, optionally capped per class."""
    keep = sorted(set(int(k) for k in keep))
    missing = set(keep) - set(ds.classes)
    if missing:
        raise IngestionError(f"classes {sorted(missing)} do not occur in the dataset")
    mask = np.isin(ds.labels, keep)
    if per_class_cap is not None:
        rank = pd.Series(ds.labels).groupby(ds.labels).cumcount().to_numpy()
        mask &= rank < per_class_cap
    if not mask.any():
        raise IngestionError("class filter left no samples")
    return ds.subset(np.flatnonzero(mask))
