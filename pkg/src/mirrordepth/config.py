"""Run configuration: a preset plus flat ``key=value`` overrides.

Every tunable default lives under a dotted key (``optim.lr0``,
``vision.tap_layers``, ``eval.crop`` ...). ``config.resolved`` lists every
key of the effective configuration, one ``key=value`` per line in sorted
order, and is enough to reproduce a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .decoder import DecoderConfig
from .encoders import TextEncoderConfig, VisionEncoderConfig
from .metrics import CROPS, DEPTH_CAPS
from .model import ModelConfig, paper_config, toy_config
from .training import MIRROR_MODES, LossConfig, OptimConfig


class ConfigKeyError(KeyError):
    pass


# training and data defaults per preset, beyond the model shapes
_PRESET_EXTRAS = {
    "toy": {
        "optim": {"batch_size": 8, "lr0": 0.006, "total_steps": 1000},
        "data": {"frames": 16, "size": 64, "seed": 0},
        "eval": {"crop": "none", "cap": "outdoor"},
    },
    "paper": {
        "optim": {"batch_size": 32, "epochs": 25},
        "data": {"frames": 16, "size": 352, "seed": 0},
        "eval": {"crop": "garg", "cap": "outdoor"},
    },
}

_MODEL_SCALARS = ("mirror_tokens", "encoder_seed", "decoder_seed", "mirror_seed")
_SKIP = {("decoder", "deconv")}  # structural, set by the preset only


@dataclass
class DataConfig:
    frames: int = 16
    size: int = 64
    seed: int = 0


@dataclass
class EvalConfig:
    crop: str = "none"
    cap: str = "outdoor"  # indoor | outdoor | a number of metres
    min_depth: float = 1e-3

    @property
    def max_depth(self) -> float:
        return DEPTH_CAPS[self.cap] if self.cap in DEPTH_CAPS else float(self.cap)


@dataclass
class TrainConfig:
    mirror_mode: str = "converged"
    checkpoint_every: int = 0  # steps; 0 saves only the final state
    eval_every: int = 1  # epochs


@dataclass
class RunConfig:
    preset: str
    model: ModelConfig
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    # ---------------------------------------------------------- flat view
    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {"preset": self.preset}
        for sec in ("vision", "text", "decoder"):
            obj = getattr(self.model, sec)
            for f in fields(obj):
                if (sec, f.name) not in _SKIP:
                    out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        for name in _MODEL_SCALARS:
            out[f"model.{name}"] = getattr(self.model, name)
        for sec in ("loss", "optim", "data", "eval", "train"):
            obj = getattr(self, sec)
            for f in fields(obj):
                out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        return out

    def resolved_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in sorted(self.flat().items()))

    def write_resolved(self, path) -> None:
        Path(path).write_text(self.resolved_text(), encoding="utf-8")

    # ---------------------------------------------------------- construction
    @classmethod
    def from_preset(cls, preset: str, overrides: dict[str, str] | None = None) -> "RunConfig":
        if preset not in _PRESET_EXTRAS:
            raise ConfigKeyError(f"unknown preset {preset!r} (choose toy or paper)")
        model = toy_config() if preset == "toy" else paper_config()
        extra = _PRESET_EXTRAS[preset]
        cfg = cls(preset, model, optim=replace(OptimConfig(), **extra["optim"]),
                  data=DataConfig(**extra["data"]), eval=EvalConfig(**extra["eval"]))
        return cfg.with_overrides(overrides or {})

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        known = self.flat()
        unknown = sorted(k for k in overrides if k not in known or k == "preset")
        if unknown:
            raise ConfigKeyError(f"unknown configuration keys: {', '.join(unknown)}")
        groups: dict[str, dict[str, object]] = {}
        for key, raw in overrides.items():
            sec, name = key.split(".", 1)
            groups.setdefault(sec, {})[name] = _parse(raw, known[key], key)
        model = self.model
        for sec in ("vision", "text", "decoder"):
            if sec in groups:
                model = replace(model, **{sec: replace(getattr(model, sec), **groups[sec])})
        if "model" in groups:
            model = replace(model, **groups["model"])
        out = replace(self, model=model)
        for sec in ("loss", "optim", "data", "eval", "train"):
            if sec in groups:
                out = replace(out, **{sec: replace(getattr(out, sec), **groups[sec])})
        out.validate()
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Rebuild from a ``config.resolved`` file."""
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = parse_assignments(text.splitlines(), skip_blank=True)
        preset = values.pop("preset", None)
        if preset is None:
            raise ConfigKeyError("config.resolved lacks a preset line")
        return cls.from_preset(preset, values)

    def validate(self) -> None:
        if self.eval.crop not in CROPS:
            raise ValueError(f"eval.crop must be one of {sorted(CROPS)}")
        _ = self.eval.max_depth
        if self.train.mirror_mode not in MIRROR_MODES:
            raise ValueError(f"train.mirror_mode must be one of {MIRROR_MODES}")
        if self.data.frames < 1 or self.data.size < 1:
            raise ValueError("data.frames and data.size must be positive")
        if self.optim.batch_size < 1:
            raise ValueError("optim.batch_size must be positive")


def parse_assignments(items, skip_blank: bool = False) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items:
        if skip_blank and not item.strip():
            continue
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def _parse(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ValueError(f"bad value {raw!r} for {key}") from exc


__all__ = ["RunConfig", "DataConfig", "EvalConfig", "TrainConfig", "ConfigKeyError", "parse_assignments",
           "VisionEncoderConfig", "TextEncoderConfig", "DecoderConfig"]
