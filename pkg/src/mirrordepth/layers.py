"""Parameter initialisation helpers and the pre-norm transformer block."""

from __future__ import annotations

import math
import zlib

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

Params = dict[str, Parameter]

LN_EPS = 1e-5


def draw_normal(seed: int, name: str, shape, std: float) -> np.ndarray:
    """Float32 N(0, std^2) draw seeded by ``(seed, crc32(name))``.

    Keying the stream on the parameter name keeps every tensor's values
    independent of construction order and of which other parts exist.
    """
    rng = np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
    return rng.standard_normal(shape, dtype=np.float32) * np.float32(std)


def new_param(params: Params, name: str, data: np.ndarray, frozen: bool) -> Parameter:
    if name in params:
        raise ValueError(f"duplicate parameter name {name!r}")
    p = Parameter(name, Tensor(np.ascontiguousarray(data, dtype=np.float32)), frozen)
    params[name] = p
    return p


def add_linear(params, prefix, d_in, d_out, seed, std, frozen, bias=True, bias_value=0.0):
    new_param(params, f"{prefix}.weight", draw_normal(seed, f"{prefix}.weight", (d_in, d_out), std), frozen)
    if bias:
        new_param(params, f"{prefix}.bias", np.full(d_out, bias_value, dtype=np.float32), frozen)


def add_layer_norm(params, prefix, d, frozen):
    new_param(params, f"{prefix}.gamma", np.ones(d, dtype=np.float32), frozen)
    new_param(params, f"{prefix}.beta", np.zeros(d, dtype=np.float32), frozen)


def add_block(params, prefix, width, mlp_dim, layers, seed, frozen, clip_init=True):
    """Attention + MLP block. ``clip_init`` uses width-scaled stds, else 0.02."""
    if clip_init:
        attn_std = width ** -0.5
        proj_std = width ** -0.5 * (2 * layers) ** -0.5
        fc_std = (2 * width) ** -0.5
    else:
        attn_std = proj_std = fc_std = 0.02
    add_layer_norm(params, f"{prefix}.ln1", width, frozen)
    add_linear(params, f"{prefix}.attn.qkv", width, 3 * width, seed, attn_std, frozen)
    add_linear(params, f"{prefix}.attn.out", width, width, seed, proj_std, frozen)
    add_layer_norm(params, f"{prefix}.ln2", width, frozen)
    add_linear(params, f"{prefix}.mlp.fc1", width, mlp_dim, seed, fc_std, frozen)
    add_linear(params, f"{prefix}.mlp.fc2", mlp_dim, width, seed, proj_std, frozen)


def linear(params: Params, prefix: str, x: Tensor) -> Tensor:
    b = params.get(f"{prefix}.bias")
    return T.linear(x, params[f"{prefix}.weight"].tensor, None if b is None else b.tensor)


def layer_norm(params: Params, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.gamma"].tensor, params[f"{prefix}.beta"].tensor, LN_EPS)


def attention(params: Params, prefix: str, x: Tensor, heads: int, causal: bool) -> Tensor:
    n, width = x.shape
    dh = width // heads
    qkv = linear(params, f"{prefix}.qkv", x)
    qkv = qkv.reshape(n, 3, heads, dh).transpose(1, 2, 0, 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    mask = np.tril(np.ones((n, n), dtype=bool))[None] if causal else None
    probs = T.softmax(scores, axis=-1, mask=mask)
    ctx = T.matmul(probs, v).transpose(1, 0, 2).reshape(n, width)
    return linear(params, f"{prefix}.out", ctx)


def block(params: Params, prefix: str, x: Tensor, heads: int, causal: bool = False) -> Tensor:
    x = x + attention(params, f"{prefix}.attn", layer_norm(params, f"{prefix}.ln1", x), heads, causal)
    h = T.gelu(linear(params, f"{prefix}.mlp.fc1", layer_norm(params, f"{prefix}.ln2", x)))
    return x + linear(params, f"{prefix}.mlp.fc2", h)
