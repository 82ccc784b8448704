import json
import struct
import zlib

import numpy as np
import pytest

from src.engine import checkpoint, model_graph
from src.engine.errors import CheckpointError
from src.engine.model_graph import DcgmmModel


@pytest.fixture
def model():
    model = DcgmmModel.from_architecture("F(2,2)-G(3)-F(2,1)-G(2)i-C(3)", "4x4x1", seed=9)
    rng = np.random.default_rng(0)
    classifier = model.classifier.params
    classifier.weights[...] = rng.normal(size=classifier.weights.shape)
    classifier.bias[...] = rng.normal(size=3)
    model.layer(2).steps_seen = 40
    return model


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_save_load_restores_everything(model, tmp_path):
    path = checkpoint.save(model, tmp_path / "nested" / "model.dcgmm")
    restored = checkpoint.load(path)
    assert restored.architecture == "F(2,2)-G(3)-F(2,1)-G(2)i-C(3)"
    assert restored.layer(2).steps_seen == 40
    for original, loaded in zip(model.layers, restored.layers):
        if original.params is None:
            assert loaded.params is None
            continue
        for name, array in original.params.arrays().items():
            np.testing.assert_array_equal(loaded.params.arrays()[name], array)
    assert restored.layer(4).params.sharing == model.layer(4).params.sharing
    assert not (tmp_path / "nested" / "model.dcgmm.tmp").exists()


def test_loaded_model_gives_identical_forward(model, bar_images):
    images, _ = bar_images
    restored = checkpoint.from_bytes(checkpoint.to_bytes(model))
    a = model_graph.forward(model, images[:20])
    b = model_graph.forward(restored, images[:20])
    np.testing.assert_array_equal(a.top_loss, b.top_loss)
    np.testing.assert_array_equal(a.class_probabilities, b.class_probabilities)


def test_header_layout(model):
    blob = checkpoint.to_bytes(model)
    assert blob[:8] == checkpoint.MAGIC
    (length,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + length])
    assert list(header) == sorted(header)
    assert header["architecture"] == model.architecture
    assert {entry["dtype"] for entry in header["arrays"]} == {"<f4"}


def test_serialization_is_deterministic(model):
    assert checkpoint.to_bytes(model) == checkpoint.to_bytes(model.copy())


def test_rejects_bad_magic(model):
    blob = bytearray(checkpoint.to_bytes(model))
    blob[0:5] = b"XXXXX"
    with pytest.raises(CheckpointError, match="not a DCGMM"):
        checkpoint.from_bytes(bytes(blob))


def test_rejects_unknown_version(model):
    blob = checkpoint.to_bytes(model)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.from_bytes(_with_crc(blob[:6] + b"\x02\x00" + blob[8:-4]))


def test_rejects_flipped_byte(model):
    blob = bytearray(checkpoint.to_bytes(model))
    blob[-10] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.from_bytes(bytes(blob))


@pytest.mark.parametrize("keep", [4, 20, -1])
def test_rejects_truncation(model, keep):
    blob = checkpoint.to_bytes(model)
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(blob[:keep])


def test_rejects_invalid_architecture(model):
    blob = checkpoint.to_bytes(model)
    (length,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + length])
    header["architecture"] = "F(9,1)-G(2)"
    header_bytes = json.dumps(header, sort_keys=True).encode()
    body = checkpoint.MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + blob[12 + length : -4]
    with pytest.raises(CheckpointError, match="architecture"):
        checkpoint.from_bytes(_with_crc(body))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "absent.dcgmm")


def _rewrite_header(blob: bytes, edit) -> bytes:
    (length,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + length])
    edit(header)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    return _with_crc(checkpoint.MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + blob[12 + length : -4])


def test_rejects_inconsistent_array_shape(model):
    def reshape(header):
        header["arrays"][0]["shape"] = [999]

    with pytest.raises(CheckpointError, match="inconsistent"):
        checkpoint.from_bytes(_rewrite_header(checkpoint.to_bytes(model), reshape))


def test_rejects_missing_precision_bounds(model):
    with pytest.raises(CheckpointError, match="inconsistent"):
        checkpoint.from_bytes(_rewrite_header(checkpoint.to_bytes(model), lambda header: header.pop("precision_bounds")))
