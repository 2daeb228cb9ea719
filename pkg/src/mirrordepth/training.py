"""Scale-invariant loss, AdamW with cosine annealing, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DepthMap, Frame
from .encoders import MIRROR_STD
from .layers import draw_normal
from .metrics import EmptyMaskError, MetricsRecord, aggregate
from .model import DepthModel
from .tensor import ContractError, Parameter, Tensor

log = logging.getLogger(__name__)

MIRROR_MODES = ("converged", "disrupted")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.85
    alpha: float = 10.0
    min_depth: float = 1e-3
    max_depth: float = 80.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 0.003
    eta_min: float = 0.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 25
    batch_size: int = 4
    total_steps: int = 0  # 0: epochs * steps_per_epoch
    seed: int = 0


def _gt_arrays(gt) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(gt, DepthMap):
        return gt.depth, gt.valid
    if isinstance(gt, tuple):
        depth, valid = gt
        return np.asarray(depth, dtype=np.float32), np.asarray(valid, dtype=bool)
    depth = np.asarray(gt, dtype=np.float32)
    return depth, np.isfinite(depth) & (depth > 0)


def loss_mask(gt_depth: np.ndarray, gt_valid: np.ndarray, cfg: LossConfig) -> np.ndarray:
    return gt_valid & (gt_depth > 0) & (gt_depth >= cfg.min_depth) & (gt_depth <= cfg.max_depth)


def silog_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """``alpha * sqrt(mean(g^2) - lam * mean(g)^2)``, ``g = log(pred) - log(gt)``.

    Only pixels whose ground truth is valid and within the depth caps count.
    ``pred`` may be a tape tensor of the ground truth's shape, or a DepthMap.
    """
    if isinstance(pred, DepthMap):
        pred = Tensor(pred.depth)
    elif not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred, dtype=np.float32))
    depth, valid = _gt_arrays(gt)
    if pred.shape != depth.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {depth.shape} differ in shape")
    mask = loss_mask(depth, valid, cfg)
    if not mask.any():
        raise EmptyMaskError("no valid ground-truth pixels for the loss")
    p = pred[mask]
    if np.any(p.data <= 0):
        raise ContractError("predicted depth must be strictly positive")
    g = T.log(p) - np.log(depth[mask]).astype(p.dtype)
    mg = T.mean(g)
    d = T.mean(g * g) - (mg * mg) * cfg.lam
    return T.sqrt(T.clamp_min(d, 0.0)) * cfg.alpha


def cosine_lr(step: int, cfg: OptimConfig, total_steps: int | None = None) -> float:
    total = total_steps if total_steps is not None else cfg.total_steps
    if total <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    return cfg.eta_min + (cfg.lr0 - cfg.eta_min) * (1.0 + math.cos(math.pi * step / total)) / 2.0


@dataclass
class TrainState:
    """Everything needed to resume a run exactly.

    Randomness is derived from ``(seed, epoch)`` and ``(seed, step)``, so the
    seed plus the step counter is the whole RNG state.
    """

    model: DepthModel
    step: int = 0
    seed: int = 0
    mirror_mode: str = "converged"
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mirror_mode not in MIRROR_MODES:
            raise ValueError(f"mirror_mode must be one of {MIRROR_MODES}")

    def trainable(self) -> list[Parameter]:
        return self.model.trainable()


def adamw_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, cfg: OptimConfig) -> TrainState:
    """One decoupled-weight-decay Adam update over the trainable parameters.

    Frozen parameters are never touched. Order per parameter: decay
    ``p -= lr*wd*p``, moment updates, bias-corrected step.
    """
    params = {p.name: p for p in state.trainable()}
    if set(grads) != set(params):
        missing, extra = set(params) - set(grads), set(grads) - set(params)
        raise ContractError(f"gradients must cover the trainable set (missing={sorted(missing)}, extra={sorted(extra)})")
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient at step {state.step} in: {', '.join(sorted(bad))}")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        data = p.tensor.data
        g = grads[name].astype(data.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        m, v = state.m[name], state.v[name]
        if cfg.weight_decay:
            data -= data * data.dtype.type(lr * cfg.weight_decay)
        m *= data.dtype.type(b1)
        m += g * data.dtype.type(1.0 - b1)
        v *= data.dtype.type(b2)
        v += (g * g) * data.dtype.type(1.0 - b2)
        denom = np.sqrt(v / data.dtype.type(bc2)) + data.dtype.type(cfg.eps)
        data -= data.dtype.type(lr) * (m / data.dtype.type(bc1)) / denom
    state.step = t
    return state


def steps_per_epoch(n_frames: int, batch_size: int) -> int:
    return max(1, math.ceil(n_frames / batch_size))


def total_steps_for(n_frames: int, cfg: OptimConfig) -> int:
    return cfg.total_steps or cfg.epochs * steps_per_epoch(n_frames, cfg.batch_size)


def batch_indices(step: int, n_frames: int, cfg: OptimConfig) -> np.ndarray:
    per_epoch = steps_per_epoch(n_frames, cfg.batch_size)
    epoch, k = divmod(step, per_epoch)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n_frames)
    return order[k * cfg.batch_size:(k + 1) * cfg.batch_size]


def disrupted_mirror_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 0xD15]).generate_state(1)[0])


def _redraw_mirror(model: DepthModel, seed: int) -> None:
    old = model.params["mirror"]
    data = draw_normal(seed, old.name, old.shape, MIRROR_STD)
    model.params["mirror"] = Parameter(old.name, Tensor(data), frozen=True)


@dataclass
class TrainLog:
    steps: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, loss)
    epochs: list[tuple[int, float, MetricsRecord | None]] = field(default_factory=list)


def batch_loss(model: DepthModel, features, frames, idx, loss_cfg: LossConfig) -> Tensor:
    cond = model.conditioning()
    preds, depths, valids = [], [], []
    for i in idx:
        h, w = frames[i].depth.shape
        preds.append(model.predict(features[i], cond, h, w))
        depths.append(frames[i].depth.depth)
        valids.append(frames[i].depth.valid)
    return silog_loss(T.concat(preds, axis=0), (np.stack(depths), np.stack(valids)), loss_cfg)


def dataset_loss(model: DepthModel, features, frames, loss_cfg: LossConfig) -> float:
    with T.no_grad():
        return float(batch_loss(model, features, frames, range(len(frames)), loss_cfg).data)


def evaluate(model: DepthModel, frames, features=None, min_depth=1e-3, max_depth=80.0) -> MetricsRecord:
    pairs = []
    for i, f in enumerate(frames):
        pred = model.infer(f.rgb, None if features is None else features[i])
        pairs.append((pred, f.depth))
    return aggregate(pairs, min_depth=min_depth, max_depth=max_depth)


def encode_dataset(model: DepthModel, frames) -> list:
    """Cache tapped features; exact because the vision encoder is frozen."""
    return [model.image_features(f.rgb) for f in frames]


def prepare_state(model: DepthModel, mirror_mode: str, seed: int) -> TrainState:
    state = TrainState(model=model, seed=seed, mirror_mode=mirror_mode)
    if mirror_mode == "disrupted":
        _redraw_mirror(model, disrupted_mirror_seed(seed, 0))
    return state


def train(frames: list[Frame], model: DepthModel | None = None, loss_cfg: LossConfig = LossConfig(),
          optim_cfg: OptimConfig = OptimConfig(), mirror_mode: str = "converged",
          state: TrainState | None = None, until: int | None = None, eval_every: int = 0,
          features=None, on_step=None) -> tuple[TrainState, TrainLog]:
    """Optimise mirror and decoder on ``frames``.

    Pass ``state`` to resume; ``until`` stops early at that global step. In
    ``disrupted`` mode the mirror is redrawn from N(0, 0.02) before every step
    and is never updated.
    """
    if not frames:
        raise ValueError("training needs at least one frame")
    if state is None:
        if model is None:
            raise ValueError("give either a model or a state")
        state = prepare_state(model, mirror_mode, optim_cfg.seed)
    model = state.model
    n = len(frames)
    total = total_steps_for(n, optim_cfg)
    stop = total if until is None else min(until, total)
    per_epoch = steps_per_epoch(n, optim_cfg.batch_size)
    feats = features if features is not None else encode_dataset(model, frames)
    tlog = TrainLog()
    epoch_losses: list[float] = []

    while state.step < stop:
        step = state.step
        if state.mirror_mode == "disrupted":
            _redraw_mirror(model, disrupted_mirror_seed(state.seed, step))
        lr = cosine_lr(step, optim_cfg, total)
        idx = batch_indices(step, n, optim_cfg)
        for p in model.trainable():
            p.tensor.zero_grad()
        loss = batch_loss(model, feats, frames, idx, loss_cfg)
        loss.backward()
        grads = {p.name: p.tensor.grad for p in model.trainable()}
        adamw_step(state, grads, lr, optim_cfg)
        value = float(loss.data)
        tlog.steps.append((step, lr, value))
        if on_step is not None:
            on_step(step, lr, value)
        epoch_losses.append(value)
        if state.step % per_epoch == 0:
            epoch = state.step // per_epoch
            rec = None
            if eval_every and epoch % eval_every == 0:
                rec = evaluate(model, frames, feats, loss_cfg.min_depth, loss_cfg.max_depth)
            tlog.epochs.append((epoch, float(np.mean(epoch_losses)), rec))
            log.info("epoch %d mean loss %.5f", epoch, np.mean(epoch_losses))
            epoch_losses = []
    return state, tlog


def infer(image: np.ndarray, model: DepthModel) -> DepthMap:
    """Tape-free forward pass, resized back to the image's size."""
    return model.infer(image)
