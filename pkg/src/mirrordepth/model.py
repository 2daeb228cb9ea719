"""The assembled depth model: frozen encoders, mirror prompt, dense decoder."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import DepthMap
from .decoder import DecoderConfig, DeconvLayer, count_learnable_params, decode, init_decoder, predict_depth
from .encoders import (
    Mirror,
    TextEncoderConfig,
    VisionEncoderConfig,
    encode_image,
    encode_prompt,
    init_frozen_encoders,
    init_mirror,
)
from .layers import Params
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    mirror_tokens: int = 64
    encoder_seed: int = 0
    decoder_seed: int = 1
    mirror_seed: int = 2


def paper_config() -> ModelConfig:
    return ModelConfig()


def toy_config() -> ModelConfig:
    return ModelConfig(
        vision=VisionEncoderConfig(image_size=64, patch_size=8, width=32, layers=3, heads=2, mlp_dim=64, tap_layers=(1, 2, 3)),
        text=TextEncoderConfig(width=32, layers=2, heads=2, mlp_dim=64, max_positions=16, proj_dim=32),
        decoder=DecoderConfig(
            width=32, blocks=3, heads=2, mlp_dim=64, film_count=2, proj_in_dim=32, cond_dim=32, film_std=0.05,
            deconv=(DeconvLayer("conv", 32, 3, 1, 1), DeconvLayer("convT", 16, 4, 4, 0), DeconvLayer("convT", 1, 4, 4, 0)),
        ),
        mirror_tokens=8,
    )


PRESETS = {"toy": toy_config, "paper": paper_config}


class DepthModel:
    """Parameters live in one ordered name -> Parameter dict.

    Encoder parameters come first, then the decoder, then ``mirror``.
    """

    def __init__(self, cfg: ModelConfig, params: Params | None = None):
        self.cfg = cfg
        if params is None:
            params = init_frozen_encoders(cfg.vision, cfg.text, cfg.encoder_seed)
            params.update(init_decoder(cfg.decoder, len(cfg.vision.tap_layers), cfg.decoder_seed))
            m = init_mirror(cfg.mirror_tokens, cfg.text.width, cfg.mirror_seed)
            params[m.m.name] = m.m
        self.params = params

    # -- mirror
    @property
    def mirror(self) -> Mirror:
        return Mirror(self.params["mirror"], self.cfg.mirror_seed)

    def set_mirror(self, mirror: Mirror) -> None:
        if mirror.m.shape != self.params["mirror"].shape:
            raise ValueError("mirror shape mismatch")
        self.params["mirror"] = mirror.m

    # -- parameter views
    def trainable(self) -> list:
        return [p for p in self.params.values() if not p.frozen]

    def frozen(self) -> list:
        return [p for p in self.params.values() if p.frozen]

    def count_learnable(self) -> int:
        return count_learnable_params(self.params)

    def clone(self) -> "DepthModel":
        return DepthModel(self.cfg, copy.deepcopy(self.params))

    def fresh(self, decoder_seed: int, mirror_seed: int) -> "DepthModel":
        """Untrained instance sharing this model's frozen encoders."""
        cfg = replace(self.cfg, decoder_seed=decoder_seed, mirror_seed=mirror_seed)
        params = {k: v for k, v in self.params.items() if k.startswith(("vision.", "text."))}
        params.update(init_decoder(cfg.decoder, len(cfg.vision.tap_layers), cfg.decoder_seed))
        m = init_mirror(cfg.mirror_tokens, cfg.text.width, cfg.mirror_seed)
        params[m.m.name] = m.m
        return DepthModel(cfg, params)

    # -- forward pieces
    def prepare_image(self, rgb: np.ndarray) -> np.ndarray:
        """Bilinearly resize a ``(3,H,W)`` image to the encoder's input size."""
        size = self.cfg.vision.image_size
        rgb = np.asarray(rgb, dtype=np.float32)
        if rgb.shape[1:] == (size, size):
            return rgb
        with T.no_grad():
            return T.bilinear_resize(Tensor(rgb), size, size).data

    def image_features(self, rgb: np.ndarray) -> list[Tensor]:
        """Tapped hidden states, shallow to deep. Frozen, so no tape."""
        with T.no_grad():
            out = encode_image(self.params, self.cfg.vision, self.prepare_image(rgb))
        return [out[t] for t in self.cfg.vision.tap_layers]

    def conditioning(self) -> Tensor:
        pooled = self.cfg.decoder.conditioning == "film"
        return encode_prompt(self.params, self.cfg.text, self.mirror, pooled=pooled)

    def logits(self, features, cond: Tensor) -> Tensor:
        return decode(self.params, self.cfg.decoder, features, cond)

    def predict(self, features, cond: Tensor, height: int, width: int) -> Tensor:
        return predict_depth(self.logits(features, cond), height, width)

    def infer(self, rgb: np.ndarray, features=None) -> DepthMap:
        """Depth at the input's spatial size, computed without a tape."""
        h, w = np.asarray(rgb).shape[1:]
        with T.no_grad():
            feats = self.image_features(rgb) if features is None else features
            depth = self.predict(feats, self.conditioning(), h, w)
        return DepthMap(depth.data[0], np.ones((h, w), dtype=bool))
