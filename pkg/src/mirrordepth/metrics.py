"""Standard depth error metrics and evaluation crops."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from .data import DepthMap


class EmptyMaskError(ValueError):
    """No pixel survived masking."""


@dataclass(frozen=True)
class CropSpec:
    kind: str = "none"
    top: float = 0.0
    bottom: float = 1.0
    left: float = 0.0
    right: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.top < self.bottom <= 1.0 and 0.0 <= self.left < self.right <= 1.0):
            raise ValueError(f"invalid crop fractions {self}")


# NYU: rows 45:471, cols 41:601 of 480x640.
EIGEN_CROP = CropSpec("eigen", 45 / 480, 471 / 480, 41 / 640, 601 / 640)
GARG_CROP = CropSpec("garg", 0.40810811, 0.99189189, 0.03594771, 0.96405229)
NO_CROP = CropSpec()
CROPS = {"none": NO_CROP, "eigen": EIGEN_CROP, "garg": GARG_CROP}

DEPTH_CAPS = {"indoor": 10.0, "outdoor": 80.0}


def crop_bounds(shape: tuple[int, int], crop: CropSpec) -> tuple[int, int, int, int]:
    """Pixel bounds ``(r0, r1, c0, c1)``: floor for starts, ceil for ends."""
    h, w = shape
    r0, r1 = math.floor(crop.top * h), math.ceil(crop.bottom * h)
    c0, c1 = math.floor(crop.left * w), math.ceil(crop.right * w)
    r1, c1 = min(r1, h), min(c1, w)
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"crop {crop.kind} is empty on a {h}x{w} map")
    return r0, r1, c0, c1


def apply_crop(m, crop: CropSpec):
    """Crop an array ``(..., H, W)`` or a :class:`DepthMap`."""
    if crop.kind == "none" and (crop.top, crop.bottom, crop.left, crop.right) == (0.0, 1.0, 0.0, 1.0):
        return m
    if isinstance(m, DepthMap):
        r0, r1, c0, c1 = crop_bounds(m.shape, crop)
        return DepthMap(m.depth[r0:r1, c0:c1], m.valid[r0:r1, c0:c1])
    arr = np.asarray(m)
    r0, r1, c0, c1 = crop_bounds(arr.shape[-2:], crop)
    return arr[..., r0:r1, c0:c1]


@dataclass(frozen=True)
class MetricsRecord:
    abs_rel: float
    sq_rel: float
    rmse: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    t: int

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_tuple(self) -> tuple:
        return astuple(self)


def eval_mask(pred: DepthMap, gt: DepthMap, min_depth: float, max_depth: float) -> np.ndarray:
    return gt.valid & pred.valid & (gt.depth >= min_depth) & (gt.depth <= max_depth)


def compute_metrics(pred: DepthMap, gt: DepthMap, crop: CropSpec = NO_CROP,
                    min_depth: float = 1e-3, max_depth: float = 80.0) -> MetricsRecord:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    pred, gt = apply_crop(pred, crop), apply_crop(gt, crop)
    mask = eval_mask(pred, gt, min_depth, max_depth)
    if not mask.any():
        raise EmptyMaskError("no valid pixels to evaluate")
    d = pred.depth[mask].astype(np.float64)
    g = gt.depth[mask].astype(np.float64)
    return _metrics_from_values(d, g)


def _metrics_from_values(d: np.ndarray, g: np.ndarray) -> MetricsRecord:
    diff = d - g
    ratio = np.maximum(d / g, g / d)
    return MetricsRecord(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        log10=float(np.mean(np.abs(np.log10(d) - np.log10(g)))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        t=int(d.size),
    )


def aggregate(pairs, crop: CropSpec = NO_CROP, min_depth: float = 1e-3, max_depth: float = 80.0) -> MetricsRecord:
    """Metrics pooled over every valid pixel of several ``(pred, gt)`` pairs."""
    ds, gs = [], []
    for pred, gt in pairs:
        pred, gt = apply_crop(pred, crop), apply_crop(gt, crop)
        mask = eval_mask(pred, gt, min_depth, max_depth)
        ds.append(pred.depth[mask].astype(np.float64))
        gs.append(gt.depth[mask].astype(np.float64))
    d, g = np.concatenate(ds), np.concatenate(gs)
    if d.size == 0:
        raise EmptyMaskError("no valid pixels to evaluate")
    return _metrics_from_values(d, g)
