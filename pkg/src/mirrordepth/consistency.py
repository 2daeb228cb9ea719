"""Temporal consistency by pose reprojection, and box-level spatial continuity."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import BBox, DepthMap, Frame, Intrinsics, Pose, relative_pose
from .metrics import EmptyMaskError

log = logging.getLogger(__name__)

SEQUENCE_COLUMNS = ("frame", "neighbor", "incons_model", "incons_gt", "incons_random")
CONTINUITY_COLUMNS = ("class", "median_depth", "object_height")


def reproject_depth(d_next: DepthMap, pose: Pose, k: Intrinsics) -> DepthMap:
    """Forward-splat ``d_next`` into the grid of the reference frame.

    ``pose`` maps reference-camera coordinates to ``d_next``'s camera
    (``X_next = R X_ref + t``). Each valid source pixel is back-projected,
    moved by the inverse pose and projected. Its unit square, taken as a
    fronto-parallel patch at the pixel's depth, maps to a footprint in the
    reference grid; every pixel centre inside the footprint's half-open
    bounding box receives the point's depth. Footprints of a smooth surface
    tile the grid, so magnification leaves no holes for occluded points to
    show through; under the identity each footprint holds exactly its own
    pixel. Where several points land on one pixel the nearest depth wins.
    Pixels that receive nothing are invalid.
    """
    h, w = d_next.shape
    v, u = np.nonzero(d_next.valid)
    z = d_next.depth[v, u].astype(np.float64)
    keep = np.isfinite(z) & (z > 0)
    v, u, z = v[keep].astype(np.float64), u[keep].astype(np.float64), z[keep]
    inv = pose.inverse()

    def project(du, dv):
        pts = np.stack([(u + du - k.cx) / k.fx * z, (v + dv - k.cy) / k.fy * z, z], axis=1)
        ref = inv.apply(pts)
        with np.errstate(divide="ignore", invalid="ignore"):
            return ref[:, 0] / ref[:, 2] * k.fx + k.cx, ref[:, 1] / ref[:, 2] * k.fy + k.cy, ref[:, 2]

    _, _, zr = project(0.0, 0.0)
    corners = [project(du, dv) for du in (-0.5, 0.5) for dv in (-0.5, 0.5)]
    front = (zr > 0) & np.all([c[2] > 0 for c in corners], axis=0)
    xs = np.stack([c[0] for c in corners])[:, front]
    ys = np.stack([c[1] for c in corners])[:, front]
    zr = zr[front]
    # integer centres c with lo <= c < hi, clipped to the grid
    c0 = np.clip(np.ceil(xs.min(axis=0)), 0, w).astype(np.int64)
    c1 = np.clip(np.ceil(xs.max(axis=0)), 0, w).astype(np.int64)
    r0 = np.clip(np.ceil(ys.min(axis=0)), 0, h).astype(np.int64)
    r1 = np.clip(np.ceil(ys.max(axis=0)), 0, h).astype(np.int64)
    nc, nr = np.maximum(c1 - c0, 0), np.maximum(r1 - r0, 0)
    rows, cols, depth = _expand_footprints(r0, nr, c0, nc, zr)
    buf = kernels.zbuffer_splat(rows, cols, depth, h, w)
    valid = np.isfinite(buf)
    return DepthMap(np.where(valid, buf, 0.0).astype(np.float32), valid)


def _expand_footprints(r0, nr, c0, nc, z):
    """One (row, col, z) entry per pixel of each ``nr x nc`` footprint."""
    n = nr * nc
    idx = np.repeat(np.arange(z.size), n)
    local = np.arange(idx.size) - np.repeat(np.cumsum(n) - n, n)
    return r0[idx] + local // nc[idx], c0[idx] + local % nc[idx], z[idx]


def temporal_inconsistency(d_hat: DepthMap, d: DepthMap) -> tuple[np.ndarray, float]:
    """Per-pixel ``|d_hat - d| / |d_hat + d|`` (NaN off the joint mask) and its mean."""
    if d_hat.shape != d.shape:
        raise ValueError(f"maps differ in shape: {d_hat.shape} vs {d.shape}")
    mask = d_hat.valid & d.valid
    if not mask.any():
        raise EmptyMaskError("reprojected and reference maps share no valid pixel")
    a = d_hat.depth.astype(np.float64)
    b = d.depth.astype(np.float64)
    out = np.full(a.shape, np.nan)
    out[mask] = np.abs(a[mask] - b[mask]) / np.abs(a[mask] + b[mask])
    return out, float(np.mean(out[mask]))


def _predictor(model):
    if model is None:
        return None
    if callable(model) and not hasattr(model, "infer"):
        return model
    return lambda frame: model.infer(frame.rgb)


@dataclass(frozen=True)
class ConsistencyRow:
    frame: int
    neighbor: int
    incons_model: float
    incons_gt: float
    incons_random: float


def sequence_consistency(model, frames: list[Frame], window: int, random_model=None) -> list[ConsistencyRow]:
    """Score every frame against its neighbours within ``window`` steps.

    ``model`` and ``random_model`` are DepthModels or callables mapping a
    Frame to a DepthMap. For frame ``t`` and neighbour ``n`` the neighbour's
    prediction is reprojected into ``t`` and compared with ``t``'s prediction
    (``incons_model``) and with ``t``'s ground truth (``incons_gt``). The
    random column scores the untrained model's reprojection against ground
    truth; it is NaN when no random model is given. A pair whose
    reprojection shares no valid pixel with the reference scores NaN and is
    counted in a warning.
    """
    if len(frames) < 2:
        raise ValueError("sequence consistency needs at least two frames")
    if window < 0:
        raise ValueError("window must be non-negative")
    if window == 0:
        return []
    predict, predict_rand = _predictor(model), _predictor(random_model)
    preds = [predict(f) for f in frames]
    rand = [predict_rand(f) for f in frames] if predict_rand is not None else None
    rows = []
    empty = 0

    def score(d_hat, d):
        nonlocal empty
        try:
            return temporal_inconsistency(d_hat, d)[1]
        except EmptyMaskError:
            empty += 1
            return float("nan")

    for t, ft in enumerate(frames):
        for n in range(max(0, t - window), min(len(frames), t + window + 1)):
            if n == t:
                continue
            fn = frames[n]
            pose = relative_pose(ft.pose, fn.pose)
            warped = reproject_depth(preds[n], pose, fn.intrinsics)
            i_model = score(warped, preds[t])
            i_gt = score(warped, ft.depth)
            i_rand = float("nan")
            if rand is not None:
                i_rand = score(reproject_depth(rand[n], pose, fn.intrinsics), ft.depth)
            rows.append(ConsistencyRow(ft.frame_id, fn.frame_id, i_model, i_gt, i_rand))
    if empty:
        log.warning("%d frame pairs had no co-visible pixels and score NaN", empty)
    return rows


def lower_median(values: np.ndarray) -> float:
    """Median; for an even count, the lower of the two middle elements."""
    v = np.sort(np.asarray(values).reshape(-1))
    if v.size == 0:
        raise EmptyMaskError("median of an empty sample")
    return float(v[(v.size - 1) // 2])


def continuity_pairs(model, frames: list[Frame], boxes: list[BBox] | None = None
                     ) -> tuple[dict[str, list[tuple[float, float]]], int]:
    """Median predicted depth inside each box, paired with the object's height.

    Returns pairs grouped by class (each group sorted, so the result does not
    depend on box order) and the number of boxes skipped because they held
    no valid pixel.
    """
    predict = _predictor(model)
    by_id = {f.frame_id: f for f in frames}
    if boxes is None:
        boxes = [b for f in frames for b in f.boxes]
    needed = sorted({b.frame_id for b in boxes})
    missing = [i for i in needed if i not in by_id]
    if missing:
        raise ValueError(f"boxes reference unknown frames {missing}")
    preds = {i: predict(by_id[i]) for i in needed}
    groups: dict[str, list[tuple[float, float]]] = {}
    skipped = 0
    for b in boxes:
        p = preds[b.frame_id]
        h, w = p.shape
        x0, x1 = max(0, b.x0), min(w, b.x1)
        y0, y1 = max(0, b.y0), min(h, b.y1)
        region = p.depth[y0:y1, x0:x1][p.valid[y0:y1, x0:x1]] if x1 > x0 and y1 > y0 else np.empty(0)
        if region.size == 0:
            skipped += 1
            continue
        groups.setdefault(b.class_label, []).append((lower_median(region), float(b.object_height)))
    if skipped:
        log.warning("skipped %d empty boxes", skipped)
    return {c: sorted(v) for c, v in sorted(groups.items())}, skipped


def write_sequence_csv(rows: list[ConsistencyRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(SEQUENCE_COLUMNS)
        for r in rows:
            wr.writerow([r.frame, r.neighbor, repr(r.incons_model), repr(r.incons_gt), repr(r.incons_random)])


def write_continuity_csv(groups: dict[str, list[tuple[float, float]]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(CONTINUITY_COLUMNS)
        for cls, pairs in groups.items():
            for med, hgt in pairs:
                wr.writerow([cls, repr(med), repr(hgt)])
