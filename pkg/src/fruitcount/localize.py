"""Fruit 3D localization from known camera poses.

Feature tracks (produced by an external reconstruction tool or the
simulator) are triangulated, attached to fruit tracks by box containment,
and averaged into fruit centres. Relative depth comes from projecting a
centre into each observing camera; relative size is pixel area times
squared depth, normalised by the cohort mean.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .core import CameraPose, FrameImage, Fruit3D, FruitFlag, FruitTrack, NonPositiveDepth, Region, project

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 25
DEFAULT_BLUR = 5
DEFAULT_MIN_FEATURES = 50
DEFICIENT_FRACTION = 0.2


class DegenerateGeometry(ValueError):
    pass


class HighReprojectionError(ValueError):
    pass


class NoLocalizedFruit(ValueError):
    pass


@dataclass
class FeatureTrack:
    """An image feature followed across frames; ``observations`` maps frame
    to (u, v)."""

    id: int
    observations: dict[int, tuple[float, float]]
    world: np.ndarray | None = None
    reprojection_error: float | None = None

    @property
    def frames(self) -> list[int]:
        return list(self.observations)


@dataclass(frozen=True)
class MaskingConfig:
    margin: int = DEFAULT_MARGIN
    blur_window: int = DEFAULT_BLUR
    background_mode: str = "LowerThirdMean"

    def __post_init__(self) -> None:
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.blur_window < 1 or self.blur_window % 2 == 0:
            raise ValueError("blur_window must be odd and positive")
        if self.background_mode != "LowerThirdMean":
            raise ValueError(f"unknown background mode {self.background_mode!r}")


@dataclass(frozen=True)
class LocalizeConfig:
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    min_features_per_frame: int = DEFAULT_MIN_FEATURES
    reproj_threshold: float = 3.0
    min_angle_deg: float = 0.5


# --------------------------------------------------------------------------
# feature-track files
# --------------------------------------------------------------------------


def load_feature_tracks(path) -> list[FeatureTrack]:
    """Read ``id frame u v frame u v ...`` records, one per line."""
    tracks = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) < 4 or (len(tok) - 1) % 3:
            raise ValueError(f"{path}:{lineno}: expected id followed by (frame, u, v) triplets")
        obs = {}
        last = None
        for i in range(1, len(tok), 3):
            frame = int(tok[i])
            if last is not None and frame <= last:
                raise ValueError(f"{path}:{lineno}: frames must be strictly increasing")
            obs[frame] = (float(tok[i + 1]), float(tok[i + 2]))
            last = frame
        tracks.append(FeatureTrack(int(tok[0]), obs))
    return tracks


def write_feature_tracks(path, tracks: Iterable[FeatureTrack], seed: int | None = None) -> None:
    lines = ["# fruitcount feature tracks: id then (frame, u, v) triplets, (u, v) = (row, column)"]
    if seed is not None:
        lines.append(f"# seed {seed}")
    for t in tracks:
        parts = [str(t.id)]
        for f, (u, v) in t.observations.items():
            parts += [str(f), repr(float(u)), repr(float(v))]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# fruit-adjacent masking
# --------------------------------------------------------------------------


def keep_mask(shape: tuple[int, int], regions: Iterable[Region], margin: int) -> np.ndarray:
    """Union of region boxes grown by ``margin`` on every side."""
    h, w = shape
    keep = np.zeros((h, w), dtype=bool)
    for r in regions:
        r0, c0, r1, c1 = r.box
        keep[max(0, r0 - margin) : min(h, r1 + margin + 1), max(0, c0 - margin) : min(w, c1 + margin + 1)] = True
    return keep


def boundary_band(keep: np.ndarray, blur_window: int) -> np.ndarray:
    """Pixels within ``blur_window // 2`` of the edge of ``keep``."""
    half = blur_window // 2
    if half == 0 or not keep.any() or keep.all():
        return np.zeros_like(keep)
    se = np.ones((2 * half + 1, 2 * half + 1), dtype=bool)
    grown = ndimage.binary_dilation(keep, structure=se)
    shrunk = ndimage.binary_erosion(keep, structure=se, border_value=1)
    return grown & ~shrunk


def mask_for_features(
    image: FrameImage,
    regions: Sequence[Region],
    background: float,
    config: MaskingConfig | None = None,
) -> FrameImage:
    """Keep only the neighbourhood of detected fruit for feature matching.

    Pixels inside any grown box keep their value, everything else becomes
    ``background``, and a box-filter blur softens the seam.
    """
    cfg = config or MaskingConfig()
    px = image.pixels
    keep = keep_mask(px.shape[:2], regions, cfg.margin)
    bg = np.uint8(np.clip(np.rint(background), 0, 255))
    if px.ndim == 3:
        composite = np.where(keep[..., None], px, bg)
    else:
        composite = np.where(keep, px, bg)
    band = boundary_band(keep, cfg.blur_window)
    if band.any():
        size = (cfg.blur_window, cfg.blur_window) + ((1,) if px.ndim == 3 else ())
        blurred = ndimage.uniform_filter(composite.astype(np.float64), size=size, mode="nearest")
        blurred = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
        sel = band[..., None] if px.ndim == 3 else band
        composite = np.where(sel, blurred, composite)
    return FrameImage(image.index, composite.astype(np.uint8))


def background_intensity(frames: Iterable) -> float:
    """Mean intensity over the lower third (rows ``floor(2h/3)`` to ``h-1``)
    of every frame."""
    total = 0.0
    count = 0
    for fr in frames:
        px = fr.gray() if isinstance(fr, FrameImage) else np.asarray(fr, dtype=np.float64)
        h = px.shape[0]
        lower = px[(2 * h) // 3 :]
        total += float(lower.sum())
        count += lower.size
    if count == 0:
        raise ValueError("background_intensity needs at least one frame")
    return total / count


def feature_sufficiency(
    counts: Sequence[int],
    min_features_per_frame: int = DEFAULT_MIN_FEATURES,
    max_deficient_fraction: float = DEFICIENT_FRACTION,
) -> bool:
    """False when more than ``max_deficient_fraction`` of frames have fewer
    than ``min_features_per_frame`` fruit-adjacent features."""
    counts = list(counts)
    if not counts:
        return True
    deficient = sum(1 for c in counts if c < min_features_per_frame)
    return deficient / len(counts) <= max_deficient_fraction


def restrict_to_mask(
    features: Sequence[FeatureTrack],
    regions_by_frame: Mapping[int, Sequence[Region]],
    shape: tuple[int, int],
    margin: int,
) -> tuple[list[FeatureTrack], dict[int, int]]:
    """Drop feature observations outside the fruit-adjacent area.

    Returns the surviving tracks (at least two observations each) and the
    per-frame count of kept observations.
    """
    masks: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {f: 0 for f in regions_by_frame}
    h, w = shape
    kept = []
    for ft in features:
        obs = {}
        for f, (u, v) in ft.observations.items():
            if f not in masks:
                masks[f] = keep_mask(shape, regions_by_frame.get(f, ()), margin)
            r, c = int(round(u)), int(round(v))
            if 0 <= r < h and 0 <= c < w and masks[f][r, c]:
                obs[f] = (u, v)
                counts[f] = counts.get(f, 0) + 1
        if len(obs) >= 2:
            kept.append(FeatureTrack(ft.id, obs))
    return kept, counts


# --------------------------------------------------------------------------
# triangulation
# --------------------------------------------------------------------------


@dataclass
class Triangulation:
    point: np.ndarray
    reprojection_error: float


def triangulate(
    track: FeatureTrack,
    poses,
    reproj_threshold: float = 3.0,
    min_angle_deg: float = 0.5,
) -> Triangulation:
    """Linear multi-view (DLT) triangulation from known poses.

    Rows are built in normalised camera coordinates for conditioning.

    Raises:
        DegenerateGeometry: fewer than two usable views, rays closer than
            ``min_angle_deg`` to parallel, or a solution at infinity or
            behind a camera.
        HighReprojectionError: mean reprojection error above the threshold.
    """
    by_frame = poses if isinstance(poses, Mapping) else {p.frame: p for p in poses}
    views = [(by_frame[f], uv) for f, uv in track.observations.items() if f in by_frame]
    if len(views) < 2:
        raise DegenerateGeometry(f"feature {track.id}: needs two posed observations")

    rows = []
    dirs = []
    for pose, (u, v) in views:
        k = pose.intrinsics
        x = (v - k.cx) / k.fx
        y = (u - k.cy) / k.fy
        M = np.hstack([pose.rotation, pose.translation[:, None]])
        rows.append(x * M[2] - M[0])
        rows.append(y * M[2] - M[1])
        ray = pose.rotation.T @ np.array([x, y, 1.0])
        dirs.append(ray / np.linalg.norm(ray))
    D = np.array(dirs)
    min_cos = float(np.clip(D @ D.T, -1.0, 1.0).min())
    if np.degrees(np.arccos(min_cos)) < min_angle_deg:
        raise DegenerateGeometry(f"feature {track.id}: rays are nearly parallel")

    _, _, Vt = np.linalg.svd(np.array(rows))
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12 * np.linalg.norm(Xh):
        raise DegenerateGeometry(f"feature {track.id}: point at infinity")
    X = Xh[:3] / Xh[3]

    errs = []
    for pose, (u, v) in views:
        try:
            (pu, pv), _ = project(X, pose)
        except NonPositiveDepth as exc:
            raise DegenerateGeometry(f"feature {track.id}: triangulated behind camera") from exc
        errs.append(np.hypot(pu - u, pv - v))
    err = float(np.mean(errs))
    if err > reproj_threshold:
        raise HighReprojectionError(f"feature {track.id}: reprojection error {err:.3g} px")
    return Triangulation(X, err)


def triangulate_all(
    features: Sequence[FeatureTrack],
    poses,
    reproj_threshold: float = 3.0,
    min_angle_deg: float = 0.5,
) -> tuple[list[FeatureTrack], dict[str, int]]:
    """Triangulate every track, returning the successes and failure tallies."""
    by_frame = {p.frame: p for p in poses}
    ok = []
    failures = {"degenerate": 0, "reprojection": 0}
    for ft in features:
        try:
            tri = triangulate(ft, by_frame, reproj_threshold, min_angle_deg)
        except DegenerateGeometry:
            failures["degenerate"] += 1
            continue
        except HighReprojectionError:
            failures["reprojection"] += 1
            continue
        ok.append(FeatureTrack(ft.id, ft.observations, tri.point, tri.reprojection_error))
    return ok, failures


# --------------------------------------------------------------------------
# association and fruit centres
# --------------------------------------------------------------------------


def associate_features(
    features: Sequence[FeatureTrack],
    fruit_tracks: Sequence[FruitTrack],
) -> dict[int, list[int]]:
    """Attach features to the fruit whose box holds them most of the time.

    A feature qualifies for a fruit when it lies inside the fruit's box in
    more than half of the frames where both are observed. Among several
    qualifying fruits the highest inclusion ratio wins, then the smaller
    mean distance to the region centroid, then the lower track id.
    """
    by_frame: dict[int, list[FruitTrack]] = defaultdict(list)
    for trk in fruit_tracks:
        for f in trk.observations:
            by_frame[f].append(trk)
    result: dict[int, list[int]] = {trk.id: [] for trk in fruit_tracks}
    for ft in features:
        inside: dict[int, int] = defaultdict(int)
        candidates: dict[int, FruitTrack] = {}
        for f, (u, v) in ft.observations.items():
            for trk in by_frame.get(f, ()):
                if trk.observations[f].contains(u, v):
                    inside[trk.id] += 1
                    candidates[trk.id] = trk
        best = None
        for tid, n_in in inside.items():
            trk = candidates[tid]
            covis = [f for f in ft.observations if f in trk.observations]
            if 2 * n_in <= len(covis):
                continue
            ratio = n_in / len(covis)
            dist = float(
                np.mean(
                    [
                        np.hypot(ft.observations[f][0] - trk.observations[f].centroid[0],
                                 ft.observations[f][1] - trk.observations[f].centroid[1])
                        for f in covis
                    ]
                )
            )
            key = (-ratio, dist, tid)
            if best is None or key < best:
                best = key
        if best is not None:
            result[best[2]].append(ft.id)
    return result


def localize_fruit(fruit_track: FruitTrack, features: Sequence[FeatureTrack], poses) -> Fruit3D:
    """Centre, per-frame depth and raw size for one fruit track.

    The centre is the mean of the associated features' world points. A track
    with no triangulated features, or whose centre is behind every observing
    camera, is flagged Unlocalized.
    """
    worlds = [ft.world for ft in features if ft.world is not None]
    if not worlds:
        return Fruit3D(fruit_track.id, None, flags={FruitFlag.UNLOCALIZED})
    by_frame = poses if isinstance(poses, Mapping) else {p.frame: p for p in poses}
    position = np.mean(np.array(worlds, dtype=np.float64), axis=0)
    depths = {}
    sizes = []
    for f, region in fruit_track.observations.items():
        pose = by_frame.get(f)
        if pose is None:
            continue
        try:
            _, z = project(position, pose)
        except NonPositiveDepth:
            continue
        depths[f] = z
        sizes.append(region.area * z * z)
    if not depths:
        return Fruit3D(fruit_track.id, None, flags={FruitFlag.UNLOCALIZED}, n_features=len(worlds))
    raw = float(np.median(sizes))
    return Fruit3D(fruit_track.id, position, depths, raw, raw, set(), len(worlds))


def normalize_sizes(fruits: Sequence[Fruit3D]) -> list[Fruit3D]:
    """Divide each localized fruit's raw size by the mean raw size of the
    localized, unflagged cohort (so that cohort's mean becomes 1).

    Raises:
        NoLocalizedFruit: nothing to normalise against.
    """
    cohort = [f.raw_size for f in fruits if f.localized and not f.flags]
    if not cohort:
        raise NoLocalizedFruit("no localized, unflagged fruit to normalise sizes against")
    mean = float(np.mean(cohort))
    for f in fruits:
        if f.localized:
            f.rel_size = f.raw_size / mean
    return list(fruits)
