"""Shared fixtures: a tiny detector, tiny two-domain scene lists and a fast experiment config."""

import matplotlib

matplotlib.use("Agg")

import numpy as np
import pytest

from src.config import ExperimentConfig
from src.data.preprocessing import SOURCE, TARGET
from src.data.synthetic_scenes import generate_scene, scene_seed, shift_preset
from src.models.detection_transformer import DetectionTransformer, ModelConfig

TINY_IMAGE = (16, 16)
TINY_MODEL = {
    "hidden_dim": 8,
    "num_encoder_layers": 2,
    "num_decoder_layers": 2,
    "num_object_queries": 4,
    "num_heads": 2,
    "ffn_dim": 16,
    "backbone_channels": (4, 8),
    "image_size": TINY_IMAGE,
    "max_objects_per_scene": 2,
}


def make_scenes(count, domain, shift=None, seed=0, split="train"):
    return [
        generate_scene(scene_seed(seed, split, i), domain, shift, image_size=TINY_IMAGE, max_objects=2)
        for i in range(count)
    ]


def make_config(**train_overrides) -> ExperimentConfig:
    config = ExperimentConfig()
    config.update({
        "model": dict(TINY_MODEL),
        "train": {"epochs": 1, "batch_size": 2, "lr": 1e-3, "prefetch": 0, "eval_batch_size": 4,
                  **train_overrides},
    })
    return config.validate()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(**TINY_MODEL).validate()


@pytest.fixture
def tiny_detector(tiny_model_config):
    return DetectionTransformer(tiny_model_config, np.random.default_rng(0))


@pytest.fixture
def tiny_images(rng):
    return rng.uniform(0.0, 1.0, size=(2, 3) + TINY_IMAGE)


@pytest.fixture
def tiny_scenes():
    fog = shift_preset("fog")
    return {SOURCE: make_scenes(4, SOURCE, fog), TARGET: make_scenes(4, TARGET, fog)}


@pytest.fixture
def tiny_config():
    return make_config()


@pytest.fixture
def scene_factory():
    return make_scenes


@pytest.fixture
def config_factory():
    return make_config
