"""FiLM-conditioned dense decoder turning tapped hidden states into depth.

Fusion schedule (taps listed shallow to deep, projections paired in order)::

    a = proj[-1](h_deepest); a = film_0(a); a = block_0(a)
    a = a + proj[-2](h_mid); a = film_1(a); a = block_1(a)
    a = a + proj[-3](h_shallow);            a = block_2(a)

then tokens are laid out on the patch grid and upsampled by the deconvolution
stack (conv k3 s1 p1, two k4 s4 transposed convs, ReLU between).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor as T
from .layers import Params
from .tensor import DimensionError, Tensor

DECODER_STD = 0.02


@dataclass(frozen=True)
class DeconvLayer:
    kind: str  # "conv" or "convT"
    out_channels: int
    kernel: int
    stride: int
    padding: int


PAPER_DECONV = (
    DeconvLayer("conv", 64, 3, 1, 1),
    DeconvLayer("convT", 32, 4, 4, 0),
    DeconvLayer("convT", 1, 4, 4, 0),
)


@dataclass(frozen=True)
class DecoderConfig:
    width: int = 64
    blocks: int = 3
    heads: int = 4
    mlp_dim: int = 2048
    film_count: int = 2
    proj_in_dim: int = 768
    cond_dim: int = 512
    deconv: tuple[DeconvLayer, ...] = PAPER_DECONV
    freeze_film: bool = True
    film_std: float = 1.0
    conditioning: str = "film"  # or "similarity"

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("decoder width must be divisible by heads")
        if self.film_count > self.blocks:
            raise ValueError("film_count cannot exceed the number of blocks")
        if self.conditioning not in ("film", "similarity"):
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if not self.deconv or self.deconv[-1].out_channels != 1:
            raise ValueError("the deconvolution stack must end in one channel")


@dataclass
class FiLMParams:
    """One FiLM layer: two affine maps cond_dim -> width."""

    gamma_w: Tensor
    gamma_b: Tensor
    beta_w: Tensor
    beta_b: Tensor


def init_decoder(cfg: DecoderConfig, n_taps: int, seed: int) -> Params:
    """Trainable parts N(0, 0.02) with zero biases and identity layer norms.

    The FiLM nets are frozen by default. Their weights are
    N(0, film_std^2 / cond_dim); the scale net's bias starts at 1 and the shift
    net's at 0, so an all-zero condition leaves activations unchanged.
    """
    params: Params = {}
    for i in range(n_taps):
        layers.add_linear(params, f"decoder.proj.{i}", cfg.proj_in_dim, cfg.width, seed, DECODER_STD, False)
    film_std = cfg.film_std / math.sqrt(cfg.cond_dim)
    for i in range(cfg.film_count):
        layers.add_linear(params, f"decoder.film.{i}.mul", cfg.cond_dim, cfg.width, seed, film_std,
                          cfg.freeze_film, bias_value=1.0)
        layers.add_linear(params, f"decoder.film.{i}.add", cfg.cond_dim, cfg.width, seed, film_std,
                          cfg.freeze_film, bias_value=0.0)
    for i in range(cfg.blocks):
        layers.add_block(params, f"decoder.blocks.{i}", cfg.width, cfg.mlp_dim, cfg.blocks, seed, False, clip_init=False)
    c_in = cfg.width
    for i, layer in enumerate(cfg.deconv):
        shape = ((layer.out_channels, c_in, layer.kernel, layer.kernel) if layer.kind == "conv"
                 else (c_in, layer.out_channels, layer.kernel, layer.kernel))
        name = f"decoder.deconv.{i}"
        layers.new_param(params, f"{name}.weight", layers.draw_normal(seed, f"{name}.weight", shape, DECODER_STD), False)
        layers.new_param(params, f"{name}.bias", np.zeros(layer.out_channels, dtype=np.float32), False)
        c_in = layer.out_channels
    return params


def film_layer(params: Params, index: int) -> FiLMParams:
    p = f"decoder.film.{index}"
    return FiLMParams(params[f"{p}.mul.weight"].tensor, params[f"{p}.mul.bias"].tensor,
                      params[f"{p}.add.weight"].tensor, params[f"{p}.add.bias"].tensor)


def film_modulate(activation: Tensor, cond: Tensor, film: FiLMParams) -> Tensor:
    """``gamma(cond) * activation + beta(cond)``, broadcast over tokens."""
    if cond.ndim != 1 or cond.shape[0] != film.gamma_w.shape[0]:
        raise DimensionError(f"cond of shape {cond.shape} does not match FiLM input {film.gamma_w.shape[0]}")
    if activation.shape[-1] != film.gamma_w.shape[1]:
        raise DimensionError(f"activation width {activation.shape[-1]} != FiLM width {film.gamma_w.shape[1]}")
    c = cond.reshape(1, cond.shape[0])
    gamma = T.linear(c, film.gamma_w, film.gamma_b).reshape(film.gamma_w.shape[1])
    beta = T.linear(c, film.beta_w, film.beta_b).reshape(film.beta_w.shape[1])
    return activation * gamma + beta


def similarity_modulate(activation: Tensor, queries: Tensor, film: FiLMParams) -> Tensor:
    """Similarity-style conditioning used by the conditioning ablation.

    Each image token scores every query (mapped through the frozen FiLM nets
    into keys and values), and the softmax-weighted values are added back.
    """
    keys = T.linear(queries, film.gamma_w, film.gamma_b)
    values = T.linear(queries, film.beta_w, film.beta_b)
    scores = T.matmul(activation, keys.T) * (1.0 / math.sqrt(activation.shape[-1]))
    return activation + T.matmul(T.softmax(scores, axis=-1), values)


def decode(params: Params, cfg: DecoderConfig, hiddens, cond: Tensor) -> Tensor:
    """Logits ``(1, 16g, 16g)`` (paper stack) from taps ordered shallow to deep."""
    hiddens = list(hiddens)
    n = len(hiddens)
    tokens = hiddens[0].shape[0]
    g = math.isqrt(tokens)
    if g * g != tokens:
        raise DimensionError(f"{tokens} tokens do not form a square grid")
    if any(h.shape != hiddens[0].shape for h in hiddens):
        raise DimensionError("all tapped hidden states must share one shape")

    def condition(a, i):
        film = film_layer(params, i)
        if cfg.conditioning == "film":
            return film_modulate(a, cond, film)
        return similarity_modulate(a, cond, film)

    a = None
    for step in range(max(n, cfg.blocks)):
        if step < n:
            skip = layers.linear(params, f"decoder.proj.{n - 1 - step}", hiddens[n - 1 - step])
            a = skip if a is None else a + skip
        if step < cfg.film_count:
            a = condition(a, step)
        if step < cfg.blocks:
            a = layers.block(params, f"decoder.blocks.{step}", a, cfg.heads)

    x = a.T.reshape(cfg.width, g, g)
    for i, layer in enumerate(cfg.deconv):
        w = params[f"decoder.deconv.{i}.weight"].tensor
        b = params[f"decoder.deconv.{i}.bias"].tensor
        if layer.kind == "conv":
            x = T.conv2d(x, w, b, layer.stride, layer.padding)
        else:
            x = T.conv_transpose2d(x, w, b, layer.stride, layer.padding)
        if i < len(cfg.deconv) - 1:
            x = T.relu(x)
    return x


def predict_depth(logits: Tensor, target_h: int, target_w: int) -> Tensor:
    """``bilinear_resize(softplus(logits))``: strictly positive depth ``(1,H,W)``."""
    return T.bilinear_resize(T.softplus(logits), target_h, target_w)


def count_learnable_params(params) -> int:
    """Scalars in non-frozen parameters (accepts a dict or an object with ``.params``)."""
    items = params.params if hasattr(params, "params") else params
    return int(sum(p.size for p in items.values() if not p.frozen))
