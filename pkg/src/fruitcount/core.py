"""Shared domain types and pinhole geometry.

Pixel coordinates follow a ``(u, v) = (row, column)`` convention everywhere,
including every file format this package reads or writes. World and camera
coordinates are right-handed with the camera looking down ``+z``; image
columns grow with camera ``x`` and image rows grow with camera ``y``.
Reconstruction units are arbitrary; only relative depths and sizes are used.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CameraPose",
    "CountReport",
    "FrameImage",
    "Fruit3D",
    "FruitFlag",
    "FruitTrack",
    "Intrinsics",
    "NonPositiveDepth",
    "Region",
    "TrackState",
    "TrackStatus",
    "backproject",
    "check_covariance",
    "project",
]

COV_EIG_FLOOR = -1e-9
DEPTH_EPS = 1e-9


class NonPositiveDepth(ValueError):
    """Raised when a point lies on or behind the image plane."""


@dataclass(frozen=True, eq=False)
class FrameImage:
    """One frame of an image sequence.

    ``pixels`` is ``(height, width)`` for single-channel rasters or
    ``(height, width, 3)`` for colour rasters, dtype uint8.
    """

    index: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise ValueError(f"frame {self.index}: raster must be HxW or HxWx3, got {px.shape}")
        if px.shape[0] <= 0 or px.shape[1] <= 0:
            raise ValueError(f"frame {self.index}: empty raster")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else int(self.pixels.shape[2])

    def gray(self) -> np.ndarray:
        """Single-channel float64 view of the raster."""
        if self.pixels.ndim == 2:
            return self.pixels.astype(np.float64)
        # ITU-R BT.601 luma
        return self.pixels[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Region:
    """A candidate fruit detection: one connected mask component in one frame.

    Attributes:
        frame: Frame index.
        centroid: Mean pixel position ``(u, v)`` = (row, column).
        box: Inclusive pixel bounds ``(row_min, col_min, row_max, col_max)``.
        area: Pixel count of the component.
    """

    frame: int
    centroid: tuple[float, float]
    box: tuple[int, int, int, int]
    area: int

    @property
    def box_height(self) -> int:
        return self.box[2] - self.box[0] + 1

    @property
    def box_width(self) -> int:
        return self.box[3] - self.box[1] + 1

    @property
    def box_area(self) -> int:
        return self.box_height * self.box_width

    def contains(self, u: float, v: float) -> bool:
        """True if pixel position ``(u, v)`` falls on the box (continuous extent)."""
        r0, c0, r1, c1 = self.box
        return r0 - 0.5 <= u <= r1 + 0.5 and c0 - 0.5 <= v <= c1 + 0.5


@dataclass
class TrackState:
    """Kalman state ``[u, v, du, dv]`` and its 4x4 covariance."""

    x: np.ndarray
    P: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64).reshape(4)
        self.P = np.asarray(self.P, dtype=np.float64).reshape(4, 4)

    @property
    def position(self) -> tuple[float, float]:
        return float(self.x[0]), float(self.x[1])

    @property
    def velocity(self) -> tuple[float, float]:
        return float(self.x[2]), float(self.x[3])


def check_covariance(P: np.ndarray, name: str = "covariance", tol: float = 1e-9) -> None:
    """Raise ValueError unless ``P`` is symmetric positive semi-definite.

    Symmetry is checked relative to the largest entry; eigenvalues may dip to
    ``COV_EIG_FLOOR`` to absorb round-off.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"{name} must be square, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ValueError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(P))))
    if np.max(np.abs(P - P.T)) > tol * scale:
        raise ValueError(f"{name} is not symmetric")
    eig_min = float(np.linalg.eigvalsh(0.5 * (P + P.T)).min())
    if eig_min < COV_EIG_FLOOR * scale:
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {eig_min:g})")


class TrackStatus(enum.Enum):
    TENTATIVE = "Tentative"
    TRACKED = "Tracked"
    COUNTED = "Counted"
    LOST = "Lost"


_ALLOWED_TRANSITIONS = {
    TrackStatus.TENTATIVE: {TrackStatus.TRACKED, TrackStatus.LOST},
    TrackStatus.TRACKED: {TrackStatus.COUNTED, TrackStatus.LOST},
    TrackStatus.COUNTED: set(),
    TrackStatus.LOST: set(),
}


@dataclass
class FruitTrack:
    """A fruit hypothesis followed across frames.

    Owned and mutated by the tracker only. ``age`` is the number of frames
    with an associated detection, so it always equals ``len(observations)``.
    """

    id: int
    observations: dict[int, Region]
    state: TrackState
    status: TrackStatus = TrackStatus.TENTATIVE

    @property
    def age(self) -> int:
        return len(self.observations)

    @property
    def frames(self) -> list[int]:
        return list(self.observations)

    @property
    def first_frame(self) -> int:
        return next(iter(self.observations))

    @property
    def last_frame(self) -> int:
        return next(reversed(self.observations))

    @property
    def last(self) -> Region:
        return self.observations[self.last_frame]

    def add(self, region: Region) -> None:
        if self.observations and region.frame <= self.last_frame:
            raise ValueError(
                f"track {self.id}: frame {region.frame} not after {self.last_frame}"
            )
        self.observations[region.frame] = region

    def set_status(self, status: TrackStatus) -> None:
        if status is self.status:
            return
        if status not in _ALLOWED_TRANSITIONS[self.status]:
            raise ValueError(f"track {self.id}: illegal transition {self.status.value} -> {status.value}")
        self.status = status


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix mapping camera rays to (column, row, 1)."""
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera extrinsics for one frame: ``X_cam = R @ X_world + t``."""

    frame: int
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError(f"frame {self.frame}: rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix ``K [R | t]`` producing homogeneous (column, row, 1)."""
        return self.intrinsics.matrix() @ np.hstack([self.rotation, self.translation[:, None]])

    def to_camera(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=np.float64) + self.translation


def project(point, pose: CameraPose) -> tuple[tuple[float, float], float]:
    """Project a world point to pixel ``(u, v)`` and return its camera depth.

    Raises:
        NonPositiveDepth: if the camera-frame z is at or below 1e-9.
    """
    X, Y, Z = pose.to_camera(point)
    if Z <= DEPTH_EPS:
        raise NonPositiveDepth(f"camera-frame depth {Z:g} is not positive (frame {pose.frame})")
    k = pose.intrinsics
    u = k.cy + k.fy * Y / Z
    v = k.cx + k.fx * X / Z
    return (float(u), float(v)), float(Z)


def backproject(pixel: tuple[float, float], depth: float, pose: CameraPose) -> np.ndarray:
    """Inverse of :func:`project`: world point at ``depth`` along the pixel ray."""
    u, v = pixel
    k = pose.intrinsics
    cam = np.array([(v - k.cx) / k.fx * depth, (u - k.cy) / k.fy * depth, depth])
    return pose.rotation.T @ (cam - pose.translation)


class FruitFlag(enum.Enum):
    SIZE_OUTLIER = "SizeOutlier"
    DEPTH_OUTLIER = "DepthOutlier"
    DUPLICATE = "Duplicate"
    UNLOCALIZED = "Unlocalized"


@dataclass
class Fruit3D:
    """3D localization result for one counted track.

    ``raw_size`` is pixel area times squared depth; ``rel_size`` starts equal
    to it and is divided by the cohort mean during normalization.
    """

    track_id: int
    position: np.ndarray | None
    depths: dict[int, float] = field(default_factory=dict)
    raw_size: float = 0.0
    rel_size: float = 0.0
    flags: set[FruitFlag] = field(default_factory=set)
    n_features: int = 0

    @property
    def localized(self) -> bool:
        return FruitFlag.UNLOCALIZED not in self.flags

    @property
    def rejected(self) -> bool:
        return bool(self.flags & {FruitFlag.DUPLICATE, FruitFlag.SIZE_OUTLIER, FruitFlag.DEPTH_OUTLIER})

    @property
    def depth(self) -> float:
        """Representative depth: median over observation frames."""
        if not self.depths:
            return float("nan")
        return float(np.median(list(self.depths.values())))


@dataclass
class CountReport:
    segment_id: str
    raw_count: int
    corrected_count: int
    ground_truth: int | None = None
    rejected: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.corrected_count > self.raw_count:
            raise ValueError(f"segment {self.segment_id}: corrected count exceeds raw count")

    @property
    def l1_raw(self) -> int | None:
        return None if self.ground_truth is None else abs(self.raw_count - self.ground_truth)

    @property
    def l1_corrected(self) -> int | None:
        return None if self.ground_truth is None else abs(self.corrected_count - self.ground_truth)
