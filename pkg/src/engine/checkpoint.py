"""
Single-file model checkpoints.

Layout: 8-byte magic, u32 LE header length, sorted-key UTF-8 JSON header
(architecture, shapes, array manifest, training metadata), the
little-endian float32 arrays back to back, then a u32 LE CRC32 of every
preceding byte.
"""

import json
import logging
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from ..models.schemas import LayerKind
from .errors import CheckpointError, ConfigurationError
from .gmm_core import CGMMParams, SharingMode
from .layers import ClassifierParams
from .model_graph import DcgmmModel, parse_config

logger = logging.getLogger(__name__)

MAGIC = b"DCGMM\x00\x01\x00"
FORMAT_VERSION = (1, 0)
ARRAY_DTYPE = "<f4"

_CGMM_FIELDS = ("logits", "centroids", "precision_raw")
_CLASSIFIER_FIELDS = ("weights", "bias")


def to_bytes(model: DcgmmModel) -> bytes:
    manifest, payload, offset = [], [], 0
    precision_bounds = {}
    for layer in model.layers:
        if layer.params is None:
            continue
        for name, array in layer.params.arrays().items():
            data = np.ascontiguousarray(array, dtype=ARRAY_DTYPE).tobytes()
            manifest.append(
                {
                    "layer": layer.index,
                    "field": name,
                    "shape": list(array.shape),
                    "dtype": ARRAY_DTYPE,
                    "offset": offset,
                    "nbytes": len(data),
                }
            )
            payload.append(data)
            offset += len(data)
        if isinstance(layer.params, CGMMParams):
            precision_bounds[str(layer.index)] = [layer.params.precision_min, layer.params.precision_max]

    header = {
        "name": model.config.name,
        "architecture": model.architecture,
        "input_shape": list(model.input_shape),
        "shapes": [list(s) for s in model.config.shapes],
        "arrays": manifest,
        "steps_seen": {str(layer.index): layer.steps_seen for layer in model.layers if layer.trainable},
        "precision_bounds": precision_bounds,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save(model: DcgmmModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    os.replace(tmp, path)
    logger.info("saved %s (%s) to %s", model.config.name, model.architecture, path)
    return path


def from_bytes(blob: bytes) -> DcgmmModel:
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError("checkpoint is truncated")
    if blob[:6] != MAGIC[:6]:
        raise CheckpointError("not a DCGMM checkpoint")
    if blob[:8] != MAGIC:
        raise CheckpointError(f"unsupported checkpoint version {blob[6]}.{blob[7]}, expected {FORMAT_VERSION[0]}.{FORMAT_VERSION[1]}")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checksum mismatch, checkpoint is corrupt or truncated")

    (header_len,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        config = parse_config(header["architecture"], tuple(header["input_shape"]), name=header["name"])
    except (ValueError, KeyError) as e:
        if isinstance(e, ConfigurationError):
            raise CheckpointError(f"checkpoint architecture is invalid: {e}") from e
        raise CheckpointError(f"checkpoint header is unreadable: {e}") from e

    try:
        return _build(config, header, memoryview(blob)[12 + header_len : -4])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint contents are inconsistent: {e!r}") from e


def _build(config, header: dict, payload: memoryview) -> DcgmmModel:
    arrays: dict[int, dict[str, np.ndarray]] = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"array {entry['layer']}.{entry['field']} runs past the payload")
        array = np.frombuffer(payload[start : start + nbytes], dtype=entry["dtype"]).astype(np.float32)
        arrays.setdefault(entry["layer"], {})[entry["field"]] = array.reshape(entry["shape"])

    model = DcgmmModel.empty(config)
    for layer in model.layers:
        blocks = arrays.get(layer.index, {})
        if layer.kind == LayerKind.CGMM:
            lo, hi = header["precision_bounds"][str(layer.index)]
            layer.params = CGMMParams(
                **{name: _required(blocks, name, layer.index) for name in _CGMM_FIELDS},
                sharing=SharingMode.INDEPENDENT if layer.spec.independent else SharingMode.SHARED,
                precision_min=lo,
                precision_max=hi,
            )
        elif layer.kind == LayerKind.CLASSIFIER:
            layer.params = ClassifierParams(**{name: _required(blocks, name, layer.index) for name in _CLASSIFIER_FIELDS})
        layer.steps_seen = header["steps_seen"].get(str(layer.index), 0)
    return model


def _required(blocks: dict, name: str, index: int) -> np.ndarray:
    if name not in blocks:
        raise CheckpointError(f"layer {index} is missing array '{name}'")
    return blocks[name]


def load(path) -> DcgmmModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    model = from_bytes(blob)
    logger.info("loaded %s (%s) from %s", model.config.name, model.architecture, path)
    return model
