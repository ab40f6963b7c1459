import json

import numpy as np
import pytest

from src.autodiff.gradcheck import check_gradients
from src.autodiff.tensor import Tensor
from src.errors import CheckpointError, ConfigError, ShapeError
from src.models.checkpoint import (FORMAT_VERSION, HEADER_KEY, load_checkpoint, load_module_state, module_state,
                                   save_checkpoint)
from src.models.detection_transformer import DetectionTransformer, ModelConfig, sine_position_embedding
from src.models.layers import Linear, MultiHeadAttention


# === Layers ===

def test_linear_maps_last_axis(rng):
    layer = Linear(3, 5, rng)
    out = layer(Tensor(rng.normal(size=(2, 4, 3))))
    assert out.shape == (2, 4, 5)
    assert set(layer.named_parameters()) == {"weight", "bias"}


def test_attention_keeps_query_shape(rng):
    attn = MultiHeadAttention(8, 2, rng)
    out = attn(Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.normal(size=(2, 7, 8))))
    assert out.shape == (2, 3, 8)


def test_sine_embedding_shape_and_range():
    emb = sine_position_embedding(4, 5, 8)
    assert emb.shape == (20, 8)
    assert np.all(np.abs(emb) <= 1.0)
    assert len({tuple(row) for row in emb}) == 20


# === Config ===

def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        ModelConfig(hidden_dim=10, num_heads=4).validate()


def test_queries_must_cover_max_objects():
    with pytest.raises(ConfigError):
        ModelConfig(num_object_queries=3, max_objects_per_scene=5).validate()


# === Forward pass ===

def test_forward_shapes(tiny_detector, tiny_model_config, tiny_images):
    out = tiny_detector(Tensor(tiny_images))
    cfg = tiny_model_config
    assert len(out.features) == cfg.num_levels
    assert out.features[-1].shape == (2, cfg.backbone_channels[1], 4, 4)
    assert len(out.encoder_states) == cfg.num_encoder_layers
    assert [s.layer_index for s in out.encoder_states] == [1, 2]
    assert out.encoder_states[-1].tokens.shape == (2, 16, cfg.hidden_dim)
    assert len(out.decoder_states) == len(out.predictions) == cfg.num_decoder_layers
    for pred in out.predictions:
        assert pred.class_probs.shape == (2, cfg.num_object_queries, cfg.num_classes + 1)
        assert pred.boxes.shape == (2, cfg.num_object_queries, 4)
        np.testing.assert_allclose(pred.class_probs.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all((pred.boxes.data > 0) & (pred.boxes.data < 1))


def test_domain_queries_occupy_slot_zero(tiny_detector, tiny_model_config, tiny_images):
    out = tiny_detector(Tensor(tiny_images), enc_domain_query=True, dec_domain_query=True)
    m = tiny_model_config.num_object_queries
    for state in out.encoder_states:
        assert state.has_domain_query
        assert state.tokens.shape[1] == 17
        assert state.domain_query.shape == (2, tiny_model_config.hidden_dim)
        assert state.content.shape[1] == 16
    for state in out.decoder_states:
        assert state.tokens.shape[1] == m + 1
    assert out.predictions[-1].class_probs.shape[1] == m


def test_missing_domain_query_raises(tiny_detector, tiny_images):
    out = tiny_detector(Tensor(tiny_images))
    with pytest.raises(ShapeError):
        out.encoder_states[0].domain_query


def test_multi_level_tokens(tiny_images):
    config = ModelConfig(hidden_dim=8, num_levels=2, num_encoder_layers=1, num_decoder_layers=1,
                         num_object_queries=4, num_heads=2, ffn_dim=16, backbone_channels=(4, 8),
                         max_objects_per_scene=2).validate()
    out = DetectionTransformer(config, np.random.default_rng(0))(Tensor(tiny_images))
    assert [f.shape[-1] for f in out.features] == [4, 2]
    assert out.encoder_states[0].tokens.shape[1] == 16 + 4


def test_forward_is_deterministic(tiny_model_config, tiny_images):
    a = DetectionTransformer(tiny_model_config, np.random.default_rng(3))(Tensor(tiny_images))
    b = DetectionTransformer(tiny_model_config, np.random.default_rng(3))(Tensor(tiny_images))
    np.testing.assert_array_equal(a.predictions[-1].boxes.data, b.predictions[-1].boxes.data)
    np.testing.assert_array_equal(a.predictions[-1].class_probs.data, b.predictions[-1].class_probs.data)


def test_rejects_non_rgb_batch(tiny_detector):
    with pytest.raises(ShapeError):
        tiny_detector(Tensor(np.zeros((1, 1, 16, 16))))


def test_all_zero_image_gives_finite_outputs(tiny_detector):
    out = tiny_detector(Tensor(np.zeros((2, 3, 16, 16))), enc_domain_query=True, dec_domain_query=True)
    for state in out.encoder_states + out.decoder_states:
        assert np.all(np.isfinite(state.tokens.data))
    for pred in out.predictions:
        assert np.all(np.isfinite(pred.class_probs.data)) and np.all(np.isfinite(pred.boxes.data))


def test_image_smaller_than_backbone_stride(tiny_detector):
    with pytest.raises(ShapeError, match="smaller"):
        tiny_detector(Tensor(np.zeros((1, 3, 1, 16))))
    config = ModelConfig(hidden_dim=8, num_levels=3, num_encoder_layers=1, num_decoder_layers=1,
                         num_object_queries=4, num_heads=2, ffn_dim=16, backbone_channels=(4, 8),
                         max_objects_per_scene=2).validate()
    with pytest.raises(ShapeError):
        DetectionTransformer(config, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 4, 4))))


def test_domain_query_changes_content_tokens(tiny_detector, tiny_images):
    plain = tiny_detector(Tensor(tiny_images))
    queried = tiny_detector(Tensor(tiny_images), enc_domain_query=True, dec_domain_query=True)
    for with_query, without in zip(queried.encoder_states + queried.decoder_states,
                                   plain.encoder_states + plain.decoder_states):
        assert with_query.content.shape == without.tokens.shape
        assert not np.allclose(with_query.content.data, without.tokens.data)


def test_cross_attention_over_zero_memory_ignores_queries(tiny_detector, rng):
    cross_attn = tiny_detector.decoder_layers[0].cross_attn
    memory = Tensor(np.zeros((1, 16, 8)))
    first = cross_attn(Tensor(rng.normal(size=(1, 5, 8))), memory).data
    second = cross_attn(Tensor(rng.normal(size=(1, 5, 8)) * 10.0), memory).data
    np.testing.assert_allclose(first, np.broadcast_to(first[:, :1], first.shape), atol=1e-12)
    np.testing.assert_allclose(first, second, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_gradients(tiny_model_config, seed):
    rng = np.random.default_rng(seed)
    detector = DetectionTransformer(tiny_model_config, rng)
    images = Tensor(rng.uniform(size=(1, 3, 16, 16)), requires_grad=True)
    cls_weights = rng.normal(size=(1, 4, 4))
    box_weights = rng.normal(size=(1, 4, 4))
    params = detector.named_parameters()
    names = ["backbone.stem.0.weight", "encoder_layers.0.self_attn.w_q.weight",
             "decoder_layers.1.cross_attn.w_v.weight", "embeddings.object_queries", "class_head.weight",
             "box_head.layers.0.weight"]

    def loss(*_):
        out = detector(images, enc_domain_query=True, dec_domain_query=True)
        total = Tensor(0.0)
        for pred in out.predictions:
            total = total + (pred.class_probs * cls_weights).sum() + (pred.boxes * box_weights).sum()
        return total

    report = check_gradients(loss, [images] + [params[n] for n in names], eps=1e-5, tol=1e-3,
                             max_entries=4, seed=seed)
    assert report.passed, report.flagged


# === Checkpoints ===

def test_checkpoint_round_trip(tmp_path, tiny_detector, tiny_model_config):
    path = save_checkpoint(tmp_path / "ckpt.npz", module_state(tiny_detector), {"note": "x"})
    arrays, header = load_checkpoint(path)
    assert header["note"] == "x" and header["format_version"] == FORMAT_VERSION
    fresh = DetectionTransformer(tiny_model_config, np.random.default_rng(99))
    load_module_state(fresh, arrays)
    for name, param in fresh.named_parameters().items():
        np.testing.assert_array_equal(param.data, tiny_detector.named_parameters()[name].data)
    assert not (tmp_path / "ckpt.npz.tmp").exists()


def test_checkpoint_missing_parameter_is_rejected(tmp_path, tiny_detector):
    arrays = module_state(tiny_detector)
    arrays.pop("class_head.weight")
    with pytest.raises(CheckpointError, match="class_head.weight"):
        load_module_state(tiny_detector, arrays)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "old.npz"
    header = np.frombuffer(json.dumps({"format_version": FORMAT_VERSION + 1}).encode(), dtype=np.uint8)
    np.savez(path, **{HEADER_KEY: header, "w": np.zeros(2)})
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unreadable_checkpoint(tmp_path):
    path = tmp_path / "broken.npz"
    path.write_bytes(b"not a zip archive")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.npz")
