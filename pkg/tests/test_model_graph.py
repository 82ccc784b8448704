import numpy as np
import pytest

from src.engine import generation, gmm_core, model_graph
from src.engine.errors import ConfigurationError, NumericalAbortError, ShapeMismatchError, UsageError
from src.engine.model_graph import REFERENCE_CONFIGS, REFERENCE_INPUT, DcgmmModel, count_parameters, parse_config
from src.models.schemas import LayerKind, SamplerConfig, SharpenConfig


class TestParsing:
    def test_shapes_are_inferred(self):
        config = parse_config("F(3,1)-G(25)-P(2,2)-F(4,1)-G(25)-C(10)", "28x28x1")
        assert config.shapes == ((26, 26, 9), (26, 26, 25), (13, 13, 25), (10, 10, 400), (10, 10, 25), (1, 1, 10))
        assert config.architecture == "F(3,1)-G(25)-P(2,2)-F(4,1)-G(25)-C(10)"

    def test_independent_suffix(self):
        config = parse_config("F(2,2)-G(4)i", (4, 4, 1))
        assert config.layers[1].independent
        assert config.layers[1].token == "G(4)i"

    @pytest.mark.parametrize(
        "text, index",
        [
            ("F(3,1)-X(2)", 2),
            ("F(3)-G(2)", 1),
            ("F(3,1)-G(0)", 2),
            ("F(3,1)-G(a)", 2),
            ("F(3,1)-C(10)-G(5)", 2),
            ("F(3,1)i-G(5)", 1),
            ("F(30,1)-G(5)", 1),
        ],
    )
    def test_rejects_with_layer_index(self, text, index):
        with pytest.raises(ConfigurationError) as info:
            parse_config(text, "28x28x1")
        assert info.value.layer_index == index
        assert str(info.value).startswith(f"layer {index}")

    def test_needs_a_cgmm(self):
        with pytest.raises(ConfigurationError):
            parse_config("F(2,2)-P(2,2)", "8x8x1")

    def test_bad_input_shape(self):
        with pytest.raises(ConfigurationError):
            parse_config("F(2,2)-G(2)", "8x8")


class TestParameterCounts:
    @pytest.mark.parametrize("name", [n for n, ref in REFERENCE_CONFIGS.items() if ref.verified])
    def test_verified_reference_configs(self, name):
        ref = REFERENCE_CONFIGS[name]
        assert count_parameters(parse_config(ref.architecture, REFERENCE_INPUT)) == ref.parameters

    def test_single_layer_count(self):
        assert count_parameters(parse_config("F(28,1)-G(49)", "28x28x1")) == 38416

    def test_independent_count_scales_with_positions(self):
        shared = count_parameters(parse_config("F(2,2)-G(4)", "4x4x1"))
        independent = count_parameters(parse_config("F(2,2)-G(4)i", "4x4x1"))
        assert independent == 4 * shared

    def test_classifier_count(self):
        assert count_parameters(parse_config("F(28,1)-G(49)-C(10)", "28x28x1")) == 38416 + 10 * 50

    def test_reference_table_flags_unverified(self):
        table = model_graph.reference_table().set_index("name")
        assert table.loc["A", "computed"] == 38416
        assert not table.loc["C", "verified"]
        assert table.loc["C", "note"] != ""
        assert table.loc["G", "note"] != ""

    def test_report_columns(self, deep_model):
        report = model_graph.parameter_report(deep_model)
        assert list(report["token"]) == ["F(2,2)", "G(3)", "F(2,1)", "G(2)"]
        assert report["counted"].sum() == count_parameters(deep_model)
        assert report.loc[1, "trainable"] == 3 + 2 * 3 * 4


class TestModel:
    def test_ordinals(self):
        model = DcgmmModel.from_architecture("F(2,2)-G(3)-F(2,1)-G(2)-C(3)", "4x4x1", seed=0)
        assert [layer.ordinal for layer in model.layers] == [None, 1, None, 2, 3]
        assert model.cgmm_indices == [2, 4]
        assert model.top_cgmm_index == 4
        assert model.classifier.index == 5

    def test_build_is_seeded(self):
        a = DcgmmModel.from_architecture("F(2,2)-G(3)", "4x4x1", seed=11)
        b = DcgmmModel.from_architecture("F(2,2)-G(3)", "4x4x1", seed=11)
        np.testing.assert_array_equal(a.layer(2).params.centroids, b.layer(2).params.centroids)

    def test_copy_is_deep(self, deep_model):
        clone = deep_model.copy()
        clone.layer(2).params.centroids[...] = 5.0
        assert not np.any(deep_model.layer(2).params.centroids == 5.0)

    def test_layer_lookup(self, deep_model):
        with pytest.raises(ConfigurationError):
            deep_model.layer(0)
        with pytest.raises(ConfigurationError):
            deep_model.layer(5)


class TestForward:
    def test_trace(self, deep_model, bar_images):
        images, _ = bar_images
        trace = model_graph.forward(deep_model, images[:10])
        assert trace.activities[1].shape == (10, 2, 2, 4)
        assert trace.activities[2].shape == (10, 2, 2, 3)
        assert trace.activities[4].shape == (10, 1, 1, 2)
        assert sorted(trace.losses) == [2, 4]
        assert trace.losses[2].shape == (10,)
        np.testing.assert_array_equal(trace.top_loss, trace.losses[4])
        assert trace.layer_input(3) is trace.activities[2]

    def test_layer_loss_is_position_mean(self, deep_model, bar_images):
        images, _ = bar_images
        trace = model_graph.forward(deep_model, images[:5])
        np.testing.assert_allclose(trace.losses[2], trace.logliks[2].reshape(5, -1).mean(axis=1))

    def test_pooling_argmax_recorded(self, bar_images):
        model = DcgmmModel.from_architecture("P(2,2)-F(2,2)-G(2)", "4x4x1", seed=0)
        trace = model_graph.forward(model, bar_images[0][:3])
        assert trace.argmax[1].shape == (3, 2, 2, 1)

    def test_full_image_fold_is_a_flat_gmm(self, bar_images):
        images, _ = bar_images
        model = DcgmmModel.from_architecture("F(4,1)-G(3)", "4x4x1", seed=0)
        params = model.layer(2).params
        trace = model_graph.forward(model, images)
        flat = gmm_core.max_component_log_likelihood(params, images.reshape(len(images), -1).astype(np.float64))
        np.testing.assert_allclose(trace.losses[2], flat, rtol=1e-12)

    def test_rejects_wrong_shape(self, deep_model):
        with pytest.raises(ShapeMismatchError):
            model_graph.forward(deep_model, np.zeros((2, 5, 5, 1)))

    def test_rejects_non_finite_input(self, deep_model, bar_images):
        images = bar_images[0][:3].copy()
        images[1, 2, 0, 0] = np.nan
        with pytest.raises(NumericalAbortError, match="input batch"):
            model_graph.forward(deep_model, images)

    def test_classifier_probabilities(self, bar_images):
        model = DcgmmModel.from_architecture("F(2,2)-G(3)-C(4)", "4x4x1", seed=0)
        trace = model_graph.forward(model, bar_images[0][:6])
        assert trace.class_probabilities.shape == (6, 4)
        # zero-initialized classifier is uniform
        np.testing.assert_allclose(trace.class_probabilities, 0.25)


class TestBackward:
    def test_uniform_sampling_shape(self, deep_model):
        out = model_graph.backward(deep_model, None, rng=0, n=7)
        assert out.shape == (7, 4, 4, 1) and out.dtype == np.float32

    def test_deterministic_with_seed(self, deep_model):
        a = model_graph.backward(deep_model, None, rng=5, n=3)
        b = model_graph.backward(deep_model, None, rng=5, n=3)
        np.testing.assert_array_equal(a, b)

    def test_absent_control_needs_count(self, deep_model):
        with pytest.raises(UsageError):
            model_graph.backward(deep_model, None, rng=0)

    def test_absent_control_needs_cgmm_start(self):
        model = DcgmmModel.from_architecture("F(2,2)-G(3)-C(4)", "4x4x1", seed=0)
        with pytest.raises(UsageError):
            model_graph.backward(model, None, rng=0, n=2)

    def test_from_classifier(self):
        model = DcgmmModel.from_architecture("F(2,2)-G(3)-C(4)", "4x4x1", seed=0)
        out = model_graph.backward(model, np.eye(4)[[0, 3]], rng=0)
        assert out.shape == (2, 4, 4, 1)
        assert np.all(np.isfinite(out))

    def test_start_layer(self, deep_model):
        out = model_graph.backward(deep_model, None, rng=0, start_layer=2, n=4)
        assert out.shape == (4, 4, 4, 1)

    def test_one_hot_limit_reconstructs_centroids(self):
        model = DcgmmModel.from_architecture("F(2,2)-G(2)", "2x2x1", seed=0)
        params = model.layer(2).params
        params.centroids[...] = [[0.1, 0.2, 0.3, 0.4], [0.9, 0.8, 0.7, 0.6]]
        params.precision_raw[...] = 1e6
        control = np.zeros((1, 1, 1, 2))
        control[..., 1] = 1.0
        out = model_graph.backward(model, control, rng=0)
        np.testing.assert_allclose(out[0, :, :, 0], [[0.9, 0.8], [0.7, 0.6]], atol=1e-2)

    def test_top_s_matches_one_hot_control(self, deep_model):
        control = np.zeros((3, 1, 1, 2))
        control[..., 0] = 0.6
        control[..., 1] = 0.4
        sampler = SamplerConfig(top_s=1)
        filtered = model_graph.backward(deep_model, control, rng=0, sampler=sampler, start_layer=4)
        one_hot = np.zeros_like(control)
        one_hot[..., 0] = 1.0
        np.testing.assert_array_equal(filtered, model_graph.backward(deep_model, one_hot, rng=0, sampler=sampler, start_layer=4))

    def test_fallbacks_reported_per_layer(self, deep_model):
        diagnostics = {}
        model_graph.backward(deep_model, np.zeros((3, 1, 1, 2)), rng=0, diagnostics=diagnostics)
        assert diagnostics["fallbacks"][4] == 3
        assert set(diagnostics["fallbacks"]) == {2, 4}

    def test_sharpens_only_below_requested_target(self, deep_model, monkeypatch):
        calls = []

        def recording(model, index, t, cfg):
            calls.append(index)
            return t

        monkeypatch.setattr(generation, "sharpen", recording)
        model_graph.backward(deep_model, None, rng=0, n=2, sharpening=SharpenConfig(iterations=3))
        assert calls == [3, 1]
        calls.clear()
        model_graph.backward(deep_model, None, rng=0, n=2, sharpening=SharpenConfig(iterations=3, target_layer=4))
        assert calls == [3]

    def test_kinds(self, deep_model):
        assert [layer.kind for layer in deep_model.layers] == [
            LayerKind.FOLDING,
            LayerKind.CGMM,
            LayerKind.FOLDING,
            LayerKind.CGMM,
        ]
