"""Frozen vision/text transformers and the learnable mirror prompt.

The vision encoder patchifies an image, prepends a class token and exposes the
patch tokens after selected blocks. The text encoder never sees a tokenizer:
its input sequence is ``[BOS; mirror rows; EOS]`` and its output is the
projected hidden state at the EOS position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor as T
from .layers import Params
from .tensor import DimensionError, Parameter, Tensor

IMAGE_MEAN = 0.5
IMAGE_STD = 0.5
EMBED_STD = 0.02
MIRROR_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VisionEncoderConfig:
    image_size: int = 352
    patch_size: int = 16
    width: int = 768
    layers: int = 12
    heads: int = 12
    mlp_dim: int = 3072
    tap_layers: tuple[int, ...] = (3, 6, 9)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ConfigError("vision width must be divisible by heads")
        if not self.tap_layers or any(t < 1 or t > self.layers for t in self.tap_layers):
            raise ConfigError(f"tap_layers {self.tap_layers} must lie in [1, {self.layers}]")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid ** 2


@dataclass(frozen=True)
class TextEncoderConfig:
    width: int = 512
    layers: int = 12
    heads: int = 8
    mlp_dim: int = 2048
    max_positions: int = 77
    proj_dim: int = 512

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError("text width must be divisible by heads")


@dataclass
class SpecialTokens:
    bos: Parameter
    eos: Parameter
    positional: Parameter


@dataclass
class Mirror:
    """The learnable ``(s, d_text)`` prompt matrix."""

    m: Parameter
    seed: int

    @property
    def s(self) -> int:
        return self.m.shape[0]


def init_frozen_encoders(vision_cfg: VisionEncoderConfig, text_cfg: TextEncoderConfig, seed: int) -> Params:
    """Randomly initialised, frozen stand-ins for the pretrained encoders.

    Embeddings (class, positional, BOS/EOS) are N(0, 0.02); block weights use
    width-scaled stds; the text projection is N(0, width^-0.5); layer norms
    start as the identity affine.
    """
    params: Params = {}
    v, t = vision_cfg, text_cfg
    fan_in = 3 * v.patch_size ** 2
    layers.new_param(params, "vision.patch.weight",
                     layers.draw_normal(seed, "vision.patch.weight", (v.width, 3, v.patch_size, v.patch_size), fan_in ** -0.5), True)
    layers.new_param(params, "vision.class_token", layers.draw_normal(seed, "vision.class_token", (v.width,), EMBED_STD), True)
    layers.new_param(params, "vision.positional", layers.draw_normal(seed, "vision.positional", (v.tokens + 1, v.width), EMBED_STD), True)
    layers.add_layer_norm(params, "vision.ln_pre", v.width, True)
    for i in range(v.layers):
        layers.add_block(params, f"vision.blocks.{i}", v.width, v.mlp_dim, v.layers, seed, True)

    layers.new_param(params, "text.bos", layers.draw_normal(seed, "text.bos", (t.width,), EMBED_STD), True)
    layers.new_param(params, "text.eos", layers.draw_normal(seed, "text.eos", (t.width,), EMBED_STD), True)
    layers.new_param(params, "text.positional", layers.draw_normal(seed, "text.positional", (t.max_positions, t.width), EMBED_STD), True)
    for i in range(t.layers):
        layers.add_block(params, f"text.blocks.{i}", t.width, t.mlp_dim, t.layers, seed, True)
    layers.add_layer_norm(params, "text.ln_final", t.width, True)
    layers.new_param(params, "text.projection",
                     layers.draw_normal(seed, "text.projection", (t.width, t.proj_dim), t.width ** -0.5), True)
    return params


def special_tokens(params: Params) -> SpecialTokens:
    return SpecialTokens(params["text.bos"], params["text.eos"], params["text.positional"])


def init_mirror(s: int, d_text: int, seed: int, name: str = "mirror") -> Mirror:
    data = layers.draw_normal(seed, name, (s, d_text), MIRROR_STD)
    return Mirror(Parameter(name, Tensor(data), frozen=False), seed)


def randomize_mirror(mirror: Mirror, seed: int) -> Mirror:
    """Fresh N(0, 0.02) draw with the same shape, name and frozen flag."""
    data = layers.draw_normal(seed, mirror.m.name, mirror.m.shape, MIRROR_STD)
    return Mirror(Parameter(mirror.m.name, Tensor(data), frozen=mirror.m.frozen), seed)


def normalize_image(rgb: np.ndarray) -> np.ndarray:
    return ((np.asarray(rgb, dtype=np.float32) - np.float32(IMAGE_MEAN)) / np.float32(IMAGE_STD)).astype(np.float32)


def encode_image(params: Params, cfg: VisionEncoderConfig, rgb) -> dict:
    """Patch-token hidden states after each tap block, plus the last block.

    ``rgb`` is ``(3, image_size, image_size)`` in [0, 1]. Returned tensors are
    ``(tokens, width)``; the class token is dropped.
    """
    x = rgb if isinstance(rgb, Tensor) else Tensor(normalize_image(rgb))
    if x.shape != (3, cfg.image_size, cfg.image_size):
        raise DimensionError(f"encode_image expects (3, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
    patches = T.conv2d(x, params["vision.patch.weight"].tensor, None, cfg.patch_size, 0)
    tokens = patches.reshape(cfg.width, cfg.tokens).T
    cls = params["vision.class_token"].tensor.reshape(1, cfg.width)
    h = T.concat([cls, tokens], axis=0) + params["vision.positional"].tensor
    h = layers.layer_norm(params, "vision.ln_pre", h)
    out: dict = {}
    for i in range(cfg.layers):
        h = layers.block(params, f"vision.blocks.{i}", h, cfg.heads, causal=False)
        if i + 1 in cfg.tap_layers:
            out[i + 1] = h[1:]
    out["final"] = h[1:]
    return out


def prompt_sequence(params: Params, cfg: TextEncoderConfig, mirror: Mirror) -> Tensor:
    """``[BOS; M; EOS] + positional`` as an ``(s+2, width)`` tensor."""
    s = mirror.s
    if s + 2 > cfg.max_positions:
        raise ConfigError(f"mirror of {s} tokens needs {s + 2} positions; encoder has {cfg.max_positions}")
    if mirror.m.shape[1] != cfg.width:
        raise DimensionError(f"mirror width {mirror.m.shape[1]} != text width {cfg.width}")
    w = cfg.width
    seq = T.concat([params["text.bos"].tensor.reshape(1, w), mirror.m.tensor, params["text.eos"].tensor.reshape(1, w)], axis=0)
    return seq + params["text.positional"].tensor[: s + 2]


def encode_prompt(params: Params, cfg: TextEncoderConfig, mirror: Mirror, pooled: bool = True) -> Tensor:
    """EOS-pooled, projected conditioning vector of length ``proj_dim``.

    With ``pooled=False`` the projected outputs at the ``s`` mirror positions
    are returned instead (one query per mirror row), as used by the
    similarity-conditioning ablation.
    """
    h = prompt_sequence(params, cfg, mirror)
    for i in range(cfg.layers):
        h = layers.block(params, f"text.blocks.{i}", h, cfg.heads, causal=True)
    h = layers.layer_norm(params, "text.ln_final", h)
    proj = params["text.projection"].tensor
    if pooled:
        eos = h[mirror.s + 1].reshape(1, cfg.width)
        return T.matmul(eos, proj).reshape(cfg.proj_dim)
    return T.matmul(h[1: mirror.s + 1], proj)
