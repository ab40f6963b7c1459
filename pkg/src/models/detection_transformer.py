"""
Detection Transformer

A DETR-style detector small enough to train on a desktop CPU:
    - a convolutional backbone (stride-4 stem, one stride-2 conv per extra level)
    - per-level linear projection to `hidden_dim` tokens with 2-D sinusoidal
      position and learned level embeddings
    - a post-norm transformer encoder and decoder with full attention
    - shared class (softmax over K + 1) and box (3-layer MLP + sigmoid) heads
      applied to every decoder layer for deep supervision

Both the encoder and the decoder sequence may carry a learned domain query at
slot 0. It takes part in self-attention but never reaches the prediction heads,
and the decoder's cross-attention keys exclude the encoder's domain query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from src.autodiff.tensor import Tensor, concat, relu, sigmoid, softmax
from src.errors import ConfigError, ShapeError
from src.models.layers import Conv2d, FeedForward, LayerNorm, Linear, MLP, Module, MultiHeadAttention


# === Configuration ===

@dataclass
class ModelConfig:
    """
    Detector sizes.

    Attributes
    ----------
    num_levels : int
        Number of backbone feature levels fed to the encoder (L).
    hidden_dim : int
        Token width C.
    num_encoder_layers, num_decoder_layers : int
        L_enc and L_dec.
    num_object_queries : int
        M, the number of predictions per image.
    num_heads : int
        Attention heads; must divide `hidden_dim`.
    num_classes : int
        K foreground classes (the background class is added on top).
    image_size : tuple of int
        (H, W) of input images.
    ffn_dim : int
        Hidden width of the transformer feed-forward blocks.
    backbone_channels : tuple of int
        Channels after the first and second stem stage.
    max_objects_per_scene : int
        Upper bound on annotated objects; M must not be smaller.
    """
    num_levels: int = 1
    hidden_dim: int = 64
    num_encoder_layers: int = 3
    num_decoder_layers: int = 3
    num_object_queries: int = 20
    num_heads: int = 4
    num_classes: int = 3
    image_size: tuple[int, int] = (64, 64)
    ffn_dim: int = 128
    backbone_channels: tuple[int, int] = (32, 64)
    max_objects_per_scene: int = 5

    def validate(self) -> "ModelConfig":
        self.image_size = tuple(int(s) for s in self.image_size)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim={self.hidden_dim} is not divisible by num_heads={self.num_heads}")
        if self.num_levels < 1:
            raise ConfigError("num_levels must be at least 1")
        if self.num_encoder_layers < 1 or self.num_decoder_layers < 1:
            raise ConfigError("encoder and decoder need at least one layer each")
        if self.num_object_queries < self.max_objects_per_scene:
            raise ConfigError(
                f"num_object_queries={self.num_object_queries} is below the "
                f"maximum of {self.max_objects_per_scene} objects per scene"
            )
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")
        if len(self.image_size) != 2 or len(self.backbone_channels) != 2:
            raise ConfigError("image_size and backbone_channels take two values each")
        return self

    @property
    def background_class(self) -> int:
        return self.num_classes


# === Sequence and prediction containers ===

@dataclass
class SequenceState:
    """
    Token sequence at one transformer layer.

    `tokens` has shape (batch, length, C). When `has_domain_query` is set,
    slot 0 holds the domain query and the remaining slots the content tokens.
    """
    tokens: Tensor
    has_domain_query: bool
    layer_index: int

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def domain_query(self) -> Tensor:
        if not self.has_domain_query:
            raise ShapeError("domain_query", self.tokens.shape, detail="sequence has no domain query")
        return self.tokens[:, 0, :]

    @property
    def content(self) -> Tensor:
        return self.tokens[:, 1:, :] if self.has_domain_query else self.tokens


@dataclass
class DetectionSet:
    """
    Predictions of one decoder layer.

    class_probs : Tensor, shape (batch, M, K + 1), rows sum to 1; the last
        column is the background class.
    boxes : Tensor, shape (batch, M, 4), (cx, cy, w, h) relative to the image.
    """
    class_probs: Tensor
    boxes: Tensor

    @property
    def batch_size(self) -> int:
        return self.class_probs.shape[0]

    @property
    def num_queries(self) -> int:
        return self.class_probs.shape[1]

    def sample(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Plain arrays (probabilities, boxes) for one image of the batch."""
        return self.class_probs.data[index], self.boxes.data[index]


@dataclass
class ForwardOutput:
    features: list[Tensor]
    encoder_states: list[SequenceState]
    decoder_states: list[SequenceState]
    predictions: list[DetectionSet] = field(default_factory=list)


# === Embeddings ===

def sine_position_embedding(height: int, width: int, dim: int) -> np.ndarray:
    """
    Fixed 2-D sinusoidal embedding of a height x width grid, row-major.

    Half of the channels encode the normalised row coordinate, half the column
    coordinate, alternating sin/cos with geometrically spaced frequencies.

    Returns
    -------
    np.ndarray of shape (height * width, dim)
    """
    per_axis = dim // 2
    rows = (np.arange(height) + 1.0) / height * 2.0 * np.pi
    cols = (np.arange(width) + 1.0) / width * 2.0 * np.pi
    freqs = 10000.0 ** (2.0 * (np.arange(per_axis) // 2) / max(per_axis, 1))
    even = (np.arange(per_axis) % 2) == 0

    def encode(coord: np.ndarray) -> np.ndarray:
        angles = coord[:, None] / freqs[None, :]
        return np.where(even, np.sin(angles), np.cos(angles))

    y_emb = np.repeat(encode(rows), width, axis=0)
    x_emb = np.tile(encode(cols), (height, 1))
    emb = np.concatenate([y_emb, x_emb], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb


class Embeddings(Module):
    """
    Learned query and embedding tables.

    level : (L, C) level embedding added to every token of a level
    enc_domain_query, enc_domain_pos : (1, C) encoder domain query and its
        dedicated position vector
    dec_domain_query : (1, C) decoder domain query
    object_queries : (M, C)
    query_pos : (M + 1, C), slot 0 belongs to the decoder domain query
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dim, m = config.hidden_dim, config.num_object_queries
        self.level = Tensor(rng.normal(size=(config.num_levels, dim)), requires_grad=True)
        self.enc_domain_query = Tensor(rng.normal(size=(1, dim)), requires_grad=True)
        self.enc_domain_pos = Tensor(rng.normal(size=(1, dim)), requires_grad=True)
        self.dec_domain_query = Tensor(rng.normal(size=(1, dim)), requires_grad=True)
        self.object_queries = Tensor(rng.normal(size=(m, dim)), requires_grad=True)
        self.query_pos = Tensor(rng.normal(size=(m + 1, dim)), requires_grad=True)
        self.dim = dim
        self._spatial_cache: dict[tuple[int, int], Tensor] = {}

    def spatial(self, height: int, width: int) -> Tensor:
        key = (height, width)
        if key not in self._spatial_cache:
            self._spatial_cache[key] = Tensor(sine_position_embedding(height, width, self.dim))
        return self._spatial_cache[key]


# === Backbone ===

class Backbone(Module):
    """Four-conv stem (total stride 4) plus one stride-2 conv per extra level."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c0, c1 = config.backbone_channels
        self.num_levels = config.num_levels
        self.stem = [
            Conv2d(3, c0, 3, rng, stride=2, padding=1),
            Conv2d(c0, c0, 3, rng, stride=1, padding=1),
            Conv2d(c0, c1, 3, rng, stride=2, padding=1),
            Conv2d(c1, c1, 3, rng, stride=1, padding=1),
        ]
        self.downsample = [Conv2d(c1, c1, 3, rng, stride=2, padding=1) for _ in range(config.num_levels - 1)]
        self.out_channels = c1

    def forward(self, images: Tensor) -> list[Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError("backbone_forward", images.shape, detail="expected (batch, 3, H, W)")
        minimum = 2 ** self.num_levels
        if images.shape[2] < minimum or images.shape[3] < minimum:
            raise ShapeError("backbone_forward", images.shape,
                             detail=f"image smaller than {minimum} pixels for {self.num_levels} levels")
        x = images
        for conv in self.stem:
            x = relu(conv(x))
        maps = [x]
        for conv in self.downsample:
            x = relu(conv(x))
            maps.append(x)
        return maps


# === Transformer layers ===

class EncoderLayer(Module):
    def __init__(self, dim: int, num_heads: int, ffn_dim: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm2 = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.self_attn(x, x))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(Module):
    def __init__(self, dim: int, num_heads: int, ffn_dim: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm3 = LayerNorm(dim)

    def forward(self, x: Tensor, memory: Tensor) -> Tensor:
        x = self.norm1(x + self.self_attn(x, x))
        x = self.norm2(x + self.cross_attn(x, memory))
        return self.norm3(x + self.ffn(x))


# === Detector ===

class DetectionTransformer(Module):
    """
    Detection transformer with optional encoder/decoder domain queries.

    Parameters
    ----------
    config : ModelConfig
    rng : np.random.Generator
        Source of every initial weight.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config.validate()
        dim = config.hidden_dim
        self.backbone = Backbone(config, rng)
        self.input_proj = [Linear(self.backbone.out_channels, dim, rng) for _ in range(config.num_levels)]
        self.embeddings = Embeddings(config, rng)
        self.encoder_layers = [
            EncoderLayer(dim, config.num_heads, config.ffn_dim, rng) for _ in range(config.num_encoder_layers)
        ]
        self.decoder_layers = [
            DecoderLayer(dim, config.num_heads, config.ffn_dim, rng) for _ in range(config.num_decoder_layers)
        ]
        self.class_head = Linear(dim, config.num_classes + 1, rng)
        self.box_head = MLP([dim, dim, dim, 4], rng)

    # --- stages ---

    def backbone_forward(self, images: Tensor) -> list[Tensor]:
        return self.backbone(images)

    def build_encoder_input(self, features: list[Tensor], with_domain_query: bool) -> SequenceState:
        """Flatten, project and embed every level, optionally prepending the domain query."""
        pieces = []
        for level, fmap in enumerate(features):
            batch, channels, height, width = fmap.shape
            flat = fmap.reshape(batch, channels, height * width).transpose(0, 2, 1)
            tokens = self.input_proj[level](flat)
            tokens = tokens + self.embeddings.spatial(height, width) + self.embeddings.level[level]
            pieces.append(tokens)
        batch = features[0].shape[0]
        if with_domain_query:
            query = self.embeddings.enc_domain_query + self.embeddings.enc_domain_pos
            pieces.insert(0, query + np.zeros((batch, 1, self.config.hidden_dim)))
        tokens = pieces[0] if len(pieces) == 1 else concat(pieces, axis=1)
        return SequenceState(tokens=tokens, has_domain_query=with_domain_query, layer_index=0)

    def encoder_forward(self, z0: SequenceState) -> list[SequenceState]:
        states, x = [], z0.tokens
        for i, layer in enumerate(self.encoder_layers, start=1):
            x = layer(x)
            states.append(SequenceState(tokens=x, has_domain_query=z0.has_domain_query, layer_index=i))
        return states

    def build_decoder_input(self, batch_size: int, with_domain_query: bool) -> SequenceState:
        emb = self.embeddings
        if with_domain_query:
            queries = concat([emb.dec_domain_query, emb.object_queries], axis=0) + emb.query_pos
        else:
            queries = emb.object_queries + emb.query_pos[1:]
        tokens = queries + np.zeros((batch_size,) + queries.shape)
        return SequenceState(tokens=tokens, has_domain_query=with_domain_query, layer_index=0)

    def decoder_forward(self, q0: SequenceState, memory: SequenceState) -> list[SequenceState]:
        keys = memory.content
        states, x = [], q0.tokens
        for i, layer in enumerate(self.decoder_layers, start=1):
            x = layer(x, keys)
            states.append(SequenceState(tokens=x, has_domain_query=q0.has_domain_query, layer_index=i))
        return states

    def predict(self, state: SequenceState) -> DetectionSet:
        content = state.content
        probs = softmax(self.class_head(content), axis=-1)
        boxes = sigmoid(self.box_head(content))
        return DetectionSet(class_probs=probs, boxes=boxes)

    # --- full pass ---

    def forward(self, images: Tensor, enc_domain_query: bool = False,
                dec_domain_query: bool = False) -> ForwardOutput:
        """
        Run backbone, encoder, decoder and heads.

        Parameters
        ----------
        images : Tensor
            Batch of shape (B, 3, H, W) with values in [0, 1].
        enc_domain_query, dec_domain_query : bool, optional
            Whether to prepend the encoder / decoder domain query.

        Returns
        -------
        ForwardOutput
            Backbone maps, all encoder and decoder layer states and one
            DetectionSet per decoder layer.
        """
        features = self.backbone_forward(images)
        z0 = self.build_encoder_input(features, with_domain_query=enc_domain_query)
        encoder_states = self.encoder_forward(z0)
        q0 = self.build_decoder_input(images.shape[0], with_domain_query=dec_domain_query)
        decoder_states = self.decoder_forward(q0, encoder_states[-1])
        predictions = [self.predict(state) for state in decoder_states]
        return ForwardOutput(features, encoder_states, decoder_states, predictions)


__all__ = [
    "ModelConfig",
    "SequenceState",
    "DetectionSet",
    "ForwardOutput",
    "Embeddings",
    "Backbone",
    "EncoderLayer",
    "DecoderLayer",
    "DetectionTransformer",
    "sine_position_embedding",
]
