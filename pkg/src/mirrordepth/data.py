"""Plain data records shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLASSES = ("car", "cyclist", "pedestrian")


@dataclass
class DepthMap:
    """Depth in metres ``(H, W)`` plus a validity mask."""

    depth: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        if self.depth.ndim != 2:
            raise ValueError(f"DepthMap expects (H, W), got {self.depth.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.depth) & (self.depth > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.depth.shape:
                raise ValueError("mask shape differs from depth shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def check(self, height: int, width: int) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= width - 1 and 0 <= self.cy <= height - 1):
            raise ValueError("principal point lies outside the image")


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``X' = R X + t`` (rotation 3x3, translation in metres)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def is_rigid(self, tol: float = 1e-6) -> bool:
        r = self.rotation
        return bool(np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) <= tol)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def as_row(self) -> list[float]:
        """12 floats, row-major ``[R | t]``."""
        m = np.hstack([self.rotation, self.translation[:, None]])
        return [float(v) for v in m.reshape(-1)]

    @classmethod
    def from_row(cls, values) -> "Pose":
        m = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


def relative_pose(cam_to_world_a: Pose, cam_to_world_b: Pose) -> Pose:
    """Transform taking camera-``a`` coordinates to camera-``b`` coordinates."""
    return cam_to_world_b.inverse().compose(cam_to_world_a)


@dataclass(frozen=True)
class BBox:
    """Pixel rectangle ``[x0, x1) x [y0, y1)`` around a labelled object."""

    frame_id: int
    class_label: str
    x0: int
    y0: int
    x1: int
    y1: int
    object_height: float

    def __post_init__(self):
        if self.class_label not in CLASSES:
            raise ValueError(f"unknown class {self.class_label!r}")
        if self.object_height <= 0:
            raise ValueError("object height must be positive")


@dataclass
class Frame:
    frame_id: int
    rgb: np.ndarray  # (3, H, W) float32 in [0, 1]
    depth: DepthMap
    pose: Pose  # camera-to-world
    intrinsics: Intrinsics
    boxes: list[BBox] = field(default_factory=list)
    skipped_objects: tuple[int, ...] = ()

    @property
    def size(self) -> tuple[int, int]:
        return self.depth.shape
