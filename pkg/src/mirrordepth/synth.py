"""Procedural scenes of textured fronto-parallel rectangles with exact depth.

World coordinates: x right, y down, z forward. Every object is an axis-aligned
rectangle in a plane of constant world z, in front of an infinite background
plane. Depth is the camera-frame z of the nearest surface hit by each pixel's
ray, computed in closed form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import CLASSES, BBox, DepthMap, Frame, Intrinsics, Pose

log = logging.getLogger(__name__)

FOG_COLOR = np.array([0.7, 0.72, 0.75])
FOG_DISTANCE = 12.0
CLASS_SIZES = {  # (width, height) in metres
    "car": (1.8, 1.5),
    "cyclist": (1.2, 1.7),
    "pedestrian": (0.6, 1.75),
}


@dataclass(frozen=True)
class SceneObject:
    center_x: float
    center_y: float
    width: float
    height: float
    distance: float  # world z of the object's plane
    pattern: int
    class_label: str
    color: tuple[float, float, float] = (0.8, 0.3, 0.2)


@dataclass
class SceneSpec:
    seed: int
    height: int
    width: int
    background_depth: float
    objects: list[SceneObject]
    trajectory: list[Pose]  # camera-to-world, one per frame
    intrinsics: Intrinsics
    background_color: tuple[float, float, float] = (0.35, 0.5, 0.4)
    min_depth: float = 1e-3
    max_depth: float = 80.0

    def __post_init__(self):
        self.objects = sorted(self.objects, key=lambda o: o.distance)
        for o in self.objects:
            if not self.min_depth < o.distance < self.background_depth:
                raise ValueError(f"object at {o.distance} m must lie between min_depth and the background")
        if not self.background_depth < self.max_depth:
            raise ValueError("background beyond max_depth")
        if not self.trajectory:
            raise ValueError("trajectory needs at least one pose")


def default_intrinsics(height: int, width: int) -> Intrinsics:
    return Intrinsics(fx=float(width), fy=float(width), cx=width / 2.0, cy=height / 2.0)


def _texture(pattern: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if pattern == 0:
        return ((np.floor(x / 0.25) + np.floor(y / 0.25)) % 2).astype(np.float64)
    if pattern == 1:
        return (np.floor(y / 0.2) % 2).astype(np.float64)
    if pattern == 2:
        return (np.floor(x / 0.2) % 2).astype(np.float64)
    return 0.5 + 0.5 * np.sin(4.0 * x) * np.cos(4.0 * y)


def _shade(albedo: np.ndarray, tex: np.ndarray, z: np.ndarray) -> np.ndarray:
    base = albedo[:, None] * (0.55 + 0.45 * tex)[None, :]
    fog = np.exp(-z / FOG_DISTANCE)[None, :]
    return base * fog + FOG_COLOR[:, None] * (1.0 - fog)


def quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    """Snap to 8-bit levels so the image survives a PPM round trip bit for bit."""
    q = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return q.astype(np.float32) / np.float32(255.0)


def _rays(spec: SceneSpec, pose: Pose):
    k = spec.intrinsics
    v, u = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    return cam @ pose.rotation.T, pose.translation


def _plane_hit(dirs, origin, z_plane):
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (z_plane - origin[2]) / dirs[:, 2]
    lam = np.where(np.isfinite(lam) & (lam > 0), lam, np.inf)
    pts = origin[None, :] + lam[:, None] * np.where(np.isfinite(lam)[:, None], dirs, 0.0)
    return lam, pts


def render_scene(spec: SceneSpec, pose_index: int, frame_id: int | None = None) -> Frame:
    """Render one frame: exact depth, shaded RGB and per-object boxes."""
    pose = spec.trajectory[pose_index]
    h, w = spec.height, spec.width
    dirs, origin = _rays(spec, pose)
    n = dirs.shape[0]
    # camera-frame depth equals lam because camera rays have unit z
    lam, pts = _plane_hit(dirs, origin, spec.background_depth)
    depth = lam.copy()
    tex = _texture(0, pts[:, 0] / 4.0, pts[:, 1] / 4.0)
    rgb = _shade(np.asarray(spec.background_color), np.where(np.isfinite(lam), tex, 0.0), np.where(np.isfinite(lam), lam, 1e3))

    boxes: list[BBox] = []
    skipped: list[int] = []
    fid = pose_index if frame_id is None else frame_id
    cam_from_world = pose.inverse()
    for idx in range(len(spec.objects) - 1, -1, -1):  # back to front
        o = spec.objects[idx]
        corners = np.array([[o.center_x + sx * o.width / 2, o.center_y + sy * o.height / 2, o.distance]
                            for sx in (-1, 1) for sy in (-1, 1)])
        if np.all(cam_from_world.apply(corners)[:, 2] <= 0):
            skipped.append(idx)
            log.warning("object %d is behind the camera in frame %d; skipped", idx, fid)
            continue
        olam, opts = _plane_hit(dirs, origin, o.distance)
        inside = (np.isfinite(olam)
                  & (np.abs(opts[:, 0] - o.center_x) <= o.width / 2)
                  & (np.abs(opts[:, 1] - o.center_y) <= o.height / 2))
        if not inside.any():
            continue
        nearer = inside & (olam < depth)
        depth = np.where(nearer, olam, depth)
        otex = _texture(o.pattern, opts[:, 0] - o.center_x, opts[:, 1] - o.center_y)
        ocol = _shade(np.asarray(o.color), otex, np.where(np.isfinite(olam), olam, 1e3))
        rgb = np.where(nearer[None, :], ocol, rgb)
        rows, cols = np.nonzero(inside.reshape(h, w))
        boxes.append(BBox(fid, o.class_label, int(cols.min()), int(rows.min()), int(cols.max()) + 1,
                          int(rows.max()) + 1, float(o.height)))

    boxes.reverse()  # front-to-back order, matching spec.objects
    depth = depth.reshape(h, w)
    valid = np.isfinite(depth)
    dmap = DepthMap(np.where(valid, depth, 0.0).astype(np.float32), valid)
    rgb = quantize_rgb(np.clip(rgb.reshape(3, h, w), 0.0, 1.0))
    return Frame(fid, rgb, dmap, pose, spec.intrinsics, boxes, tuple(sorted(skipped)))


def make_sequence(spec: SceneSpec) -> list[Frame]:
    return [render_scene(spec, i) for i in range(len(spec.trajectory))]


# ---------------------------------------------------------------- scene recipes


def random_objects(rng: np.random.Generator, background: float, size: int, fx: float, count: int,
                   near: float = 2.0) -> list[SceneObject]:
    objs = []
    for _ in range(count):
        label = CLASSES[int(rng.integers(len(CLASSES)))]
        w, hgt = CLASS_SIZES[label]
        z = float(rng.uniform(near, background - 1.0))
        half_fov = 0.5 * size / fx * z
        cx = float(rng.uniform(-0.7, 0.7) * half_fov)
        cy = float(rng.uniform(-0.4, 0.4) * half_fov)
        objs.append(SceneObject(cx, cy, w, hgt, z, int(rng.integers(4)), label,
                                tuple(float(c) for c in rng.uniform(0.15, 0.95, 3))))
    return objs


def random_scene(seed: int, size: int = 64, n_objects: tuple[int, int] = (1, 3),
                 trajectory: list[Pose] | None = None) -> SceneSpec:
    rng = np.random.default_rng([seed, 0x5CE4E])
    k = default_intrinsics(size, size)
    background = float(rng.uniform(7.0, 10.0))
    count = int(rng.integers(n_objects[0], n_objects[1] + 1))
    objs = random_objects(rng, background, size, k.fx, count)
    return SceneSpec(seed, size, size, background, objs, trajectory or [Pose.identity()], k,
                     background_color=tuple(float(c) for c in rng.uniform(0.2, 0.6, 3)))


def training_frames(n: int = 16, seed: int = 0, size: int = 64) -> list[Frame]:
    """``n`` independent single-view scenes."""
    frames = []
    for i in range(n):
        f = render_scene(random_scene(seed * 100_003 + i, size), 0, frame_id=i)
        frames.append(f)
    return frames


def dolly_scene(seed: int = 0, size: int = 64, n_frames: int = 5) -> SceneSpec:
    """Sideways camera track whose per-frame disparities are whole pixels.

    The camera steps ``16/size`` metres along x per frame. With ``fx = size``
    the layers at 4, 8 and 16 m then shift by exactly 4, 2 and 1 pixels, so
    nearest-pixel reprojection between any two frames is exact. Objects are
    placed so they stay fully in view for up to 5 frames.
    """
    rng = np.random.default_rng([seed, 0xD011])
    k = default_intrinsics(size, size)
    step = 16.0 / size
    s = size / 64.0
    layout = (("pedestrian", 4.0, 40.0, 32.0), ("car", 8.0, 20.0, 44.0), ("cyclist", 8.0, 52.0, 18.0))
    objs = []
    for label, z, u, v in layout:
        w, hgt = CLASS_SIZES[label]
        cx = (u * s - k.cx) * z / k.fx
        cy = (v * s - k.cy) * z / k.fy
        objs.append(SceneObject(cx, cy, w, hgt, z, int(rng.integers(4)), label,
                                tuple(float(c) for c in rng.uniform(0.15, 0.95, 3))))
    trajectory = [Pose(np.eye(3), np.array([i * step, 0.0, 0.0])) for i in range(n_frames)]
    return SceneSpec(seed, size, size, 16.0, objs, trajectory, k)


def forward_scene(seed: int = 0, size: int = 64, n_frames: int = 4, step: float = 0.5) -> SceneSpec:
    """Camera moving straight ahead by ``step`` metres per frame."""
    spec = random_scene(seed, size, n_objects=(1, 1))
    o = spec.objects[0]
    centred = SceneObject(0.0, 0.0, o.width, o.height, max(o.distance, 2.0 + n_frames * step), o.pattern,
                          o.class_label, o.color)
    traj = [Pose(np.eye(3), np.array([0.0, 0.0, i * step])) for i in range(n_frames)]
    return SceneSpec(seed, size, size, max(spec.background_depth, centred.distance + 1.0), [centred], traj,
                     spec.intrinsics)
