"""Save and restore a complete training state as an MDC1 container."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .io import CheckpointError, read_checkpoint_file, write_checkpoint_file
from .model import DepthModel
from .tensor import Parameter, Tensor
from .training import MIRROR_MODES, TrainState

# entry name prefixes
P, M, V = "param/", "adam_m/", "adam_v/"


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def _untext(a: np.ndarray) -> str:
    return a.astype(np.uint8).tobytes().decode("utf-8")


def state_entries(state: TrainState, cfg: RunConfig) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {
        "meta/step": np.array([state.step], dtype="<u8"),
        "meta/seed": np.array([state.seed], dtype="<u8"),
        "meta/mirror_mode": _text(state.mirror_mode),
        "meta/config": _text(cfg.resolved_text()),
    }
    for name, p in state.model.params.items():
        entries[P + name] = p.tensor.data
    for name in sorted(state.m):
        entries[M + name] = state.m[name]
        entries[V + name] = state.v[name]
    return entries


def save_checkpoint(state: TrainState, cfg: RunConfig, path) -> None:
    """Every parameter (frozen and trainable), Adam moments, step, seed and config."""
    write_checkpoint_file(state_entries(state, cfg), path)


def load_checkpoint(path, model: DepthModel | None = None) -> tuple[TrainState, RunConfig]:
    """Rebuild the state. ``model``, if given, must match the stored config and is overwritten."""
    entries = read_checkpoint_file(path)
    try:
        cfg = RunConfig.from_text(_untext(entries["meta/config"]))
        step = int(entries["meta/step"][0])
        seed = int(entries["meta/seed"][0])
        mode = _untext(entries["meta/mirror_mode"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks entry {exc.args[0]!r}") from exc
    if mode not in MIRROR_MODES:
        raise CheckpointError(f"unknown mirror mode {mode!r}")
    if model is None:
        model = DepthModel(cfg.model)
    elif model.cfg != cfg.model:
        raise CheckpointError("model configuration differs from the checkpoint's")
    names = {k[len(P):] for k in entries if k.startswith(P)}
    if names != set(model.params):
        raise CheckpointError(f"parameter set mismatch: {sorted(names ^ set(model.params))[:5]}")
    for name, p in list(model.params.items()):
        data = entries[P + name]
        if data.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {data.shape} vs {p.shape}")
        frozen = p.frozen or (name == "mirror" and mode == "disrupted")
        if name == "mirror" and mode == "converged":
            frozen = False
        model.params[name] = Parameter(name, Tensor(data.astype(np.float32)), frozen=frozen)
    state = TrainState(model=model, step=step, seed=seed, mirror_mode=mode)
    for k, a in entries.items():
        if k.startswith(M):
            state.m[k[len(M):]] = a.astype(np.float32)
        elif k.startswith(V):
            state.v[k[len(V):]] = a.astype(np.float32)
    trainable = {p.name for p in model.trainable()}
    if state.m and set(state.m) != trainable:
        raise CheckpointError("optimizer moments do not match the trainable set")
    return state, cfg
