"""Synthetic orchard sequences with exact ground truth.

Fruit are spheres idealised as fronto-parallel disks on two planes (the
target row and an optional row behind it). The camera translates sideways
along world +x with identity rotation, so every fruit keeps a constant depth
and moves purely along image columns. Frames are grayscale: a procedural
texture on a far background plane, with textured disks painted back to
front. Masks mark visible fruit pixels. Feature tracks are seeded on disk
interiors (and optionally on the background) with a limited lifetime each,
the way real image features come and go.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import CameraPose, FrameImage, Intrinsics, NonPositiveDepth, backproject, project
from .flow import FlowVector
from .ingest import (
    DatasetManifest,
    GroundTruthLabel,
    Segment,
    write_manifest,
    write_png,
    write_poses,
    write_svg_labels,
)
from .localize import FeatureTrack, write_feature_tracks

log = logging.getLogger(__name__)

FRONT = "front"
BACK = "back"
BACKGROUND = -1


class ConfigInvalid(ValueError):
    pass


class PointNotOnFruit(ValueError):
    pass


@dataclass(frozen=True)
class DropoutGaps:
    """Erase the mask of ``affected_fraction`` of target-row fruit for
    ``gap_length`` frames in the middle of their visibility."""

    gap_length: int
    affected_fraction: float


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    fruit_count_front: int = 60
    fruit_count_back: int = 0
    row_depth_front: float = 5.0
    row_depth_back: float = 12.5
    fruit_radius: float = 0.1
    radius_jitter: float = 0.1
    camera_speed: float = 0.08
    frame_count: int = 100
    width: int = 640
    height: int = 480
    focal: float = 500.0
    occlusion: DropoutGaps | None = None
    texture_noise: float = 40.0
    background_depth: float | None = None
    min_visible_frames: int = 1
    min_separation: float = 3.0
    decoy_fraction: float = 0.0
    decoy_area_factor: float = 6.0
    features_per_fruit: int = 30
    feature_length: tuple[int, int] = (4, 12)
    background_features: int = 0
    feature_noise: float = 0.0
    segments: int = 1

    def validate(self) -> None:
        def bad(msg: str) -> ConfigInvalid:
            return ConfigInvalid(f"scene config: {msg}")

        if self.row_depth_front <= 0 or self.row_depth_back <= 0:
            raise bad("row depths must be positive")
        if self.fruit_count_front < 0 or self.fruit_count_back < 0:
            raise bad("fruit counts must be non-negative")
        if self.fruit_radius <= 0 or not 0 <= self.radius_jitter < 1:
            raise bad("fruit_radius must be positive and radius_jitter in [0, 1)")
        if self.frame_count < 1 or self.width < 8 or self.height < 8:
            raise bad("need at least one frame and an image of at least 8x8")
        if self.focal <= 0:
            raise bad("focal must be positive")
        if self.occlusion is not None:
            if self.occlusion.gap_length < 1:
                raise bad("gap_length must be >= 1")
            if not 0 <= self.occlusion.affected_fraction <= 1:
                raise bad("affected_fraction must lie in [0, 1]")
        if self.background_depth is not None and self.background_depth <= max(self.row_depth_front, self.row_depth_back):
            raise bad("background_depth must lie behind both rows")
        lo, hi = self.feature_length
        if not 2 <= lo <= hi:
            raise bad("feature_length must satisfy 2 <= min <= max")
        if self.segments < 1 or self.segments > self.frame_count:
            raise bad("segments must lie in [1, frame_count]")
        if not 0 <= self.decoy_fraction <= 1 or self.decoy_area_factor <= 0:
            raise bad("decoy settings out of range")
        if self.texture_noise < 0 or self.feature_noise < 0:
            raise bad("noise amplitudes must be non-negative")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0)

    @property
    def bg_depth(self) -> float:
        if self.background_depth is not None:
            return self.background_depth
        return 1.6 * max(self.row_depth_front, self.row_depth_back)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["feature_length"] = list(self.feature_length)
        return doc


@dataclass
class SimObject:
    """One rendered disk. Decoys (e.g. signs) are rendered and masked but
    are not fruit and never enter the true count."""

    id: int
    position: np.ndarray
    radius: float
    row: str
    decoy: bool = False
    visible: list[int] = field(default_factory=list)
    gap: tuple[int, int] | None = None

    @property
    def counted(self) -> bool:
        return self.row == FRONT and not self.decoy

    @property
    def median_frame(self) -> int | None:
        if not self.visible:
            return None
        return self.visible[(len(self.visible) - 1) // 2]

    def in_gap(self, frame: int) -> bool:
        return self.gap is not None and self.gap[0] <= frame <= self.gap[1]


@dataclass
class GroundTruth:
    config: SceneConfig
    objects: list[SimObject]
    poses: list[CameraPose]
    feature_owner: dict[int, int] = field(default_factory=dict)
    segments: list[Segment] = field(default_factory=list)

    @property
    def intrinsics(self) -> Intrinsics:
        return self.poses[0].intrinsics

    def visible_in(self, frame: int) -> list[int]:
        return [o.id for o in self.objects if frame in o.visible]

    def true_count(self, row: str = FRONT) -> int:
        return sum(1 for o in self.objects if o.row == row and not o.decoy and o.visible)

    def segment_truth(self) -> dict[str, int]:
        return {s.id: s.visual_count for s in self.segments}

    def pixel_radius(self, obj: SimObject) -> float:
        return self.intrinsics.fx * obj.radius / obj.position[2]

    def object_at(self, frame: int, point) -> int:
        """Id of the nearest object whose disk covers ``point`` in ``frame``,
        or BACKGROUND."""
        pose = self.poses[frame]
        best = BACKGROUND
        best_z = np.inf
        for o in self.objects:
            try:
                (u0, v0), z = project(o.position, pose)
            except NonPositiveDepth:
                continue
            R = self.intrinsics.fx * o.radius / z
            if (point[0] - u0) ** 2 + (point[1] - v0) ** 2 <= R * R and z < best_z:
                best, best_z = o.id, z
        return best

    def to_json(self) -> dict:
        return {
            "seed": self.config.seed,
            "config": self.config.to_json(),
            "objects": [
                {
                    "id": o.id,
                    "position": [float(x) for x in o.position],
                    "radius": o.radius,
                    "row": o.row,
                    "decoy": o.decoy,
                    "visible": [o.visible[0], o.visible[-1]] if o.visible else None,
                    "gap": list(o.gap) if o.gap else None,
                }
                for o in self.objects
            ],
            "feature_owner": {str(k): v for k, v in self.feature_owner.items()},
            "segments": [asdict(s) for s in self.segments],
        }

    @classmethod
    def from_json(cls, doc: dict, poses: list[CameraPose]) -> "GroundTruth":
        cfg_doc = dict(doc["config"])
        occ = cfg_doc.pop("occlusion", None)
        cfg_doc["feature_length"] = tuple(cfg_doc["feature_length"])
        config = SceneConfig(**cfg_doc, occlusion=DropoutGaps(**occ) if occ else None)
        objects = []
        for o in doc["objects"]:
            vis = list(range(o["visible"][0], o["visible"][1] + 1)) if o["visible"] else []
            objects.append(
                SimObject(o["id"], np.array(o["position"]), o["radius"], o["row"], o["decoy"], vis,
                          tuple(o["gap"]) if o["gap"] else None)
            )
        return cls(
            config,
            objects,
            poses,
            {int(k): v for k, v in doc.get("feature_owner", {}).items()},
            [Segment(**s) for s in doc.get("segments", [])],
        )


@dataclass
class SimulatedScene:
    frames: list[FrameImage]
    masks: list[FrameImage]
    truth: GroundTruth
    labels: list[GroundTruthLabel]
    features: list[FeatureTrack]

    @property
    def poses(self) -> list[CameraPose]:
        return self.truth.poses

    @property
    def segments(self) -> list[Segment]:
        return self.truth.segments


# --------------------------------------------------------------------------
# procedural textures
# --------------------------------------------------------------------------


@dataclass
class _Waves:
    """Sum of plane waves in pixel units: ``sum a sin(ku r + kv c + phase)``."""

    ku: np.ndarray
    kv: np.ndarray
    amp: np.ndarray
    phase: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int, amplitude: float, wavelengths=(6.0, 30.0)) -> "_Waves":
        lam = rng.uniform(*wavelengths, n)
        theta = rng.uniform(0.0, 2 * np.pi, n)
        k = 2 * np.pi / lam
        amp = rng.uniform(0.5, 1.0, n)
        amp *= amplitude / max(amp.sum(), 1e-12)
        return cls(k * np.cos(theta), k * np.sin(theta), amp, rng.uniform(0.0, 2 * np.pi, n))

    def grid(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Evaluate on the outer grid ``rows x cols`` (separable form)."""
        ar = np.outer(rows, self.ku)
        ac = np.outer(cols, self.kv) + self.phase
        # sin(a + b) = sin a cos b + cos a sin b, summed over waves as matmuls
        return np.sin(ar) @ (self.amp * np.cos(ac)).T + np.cos(ar) @ (self.amp * np.sin(ac)).T


# --------------------------------------------------------------------------
# scene construction
# --------------------------------------------------------------------------


def _poses(cfg: SceneConfig) -> list[CameraPose]:
    intr = cfg.intrinsics
    return [
        CameraPose(k, np.eye(3), np.array([-cfg.camera_speed * k, 0.0, 0.0]), intr)
        for k in range(cfg.frame_count)
    ]


def _frames_in_view(cfg: SceneConfig, x: float, y: float, z: float, r: float) -> int:
    """Frames where the disk lies at least partly on the image (conservative)."""
    f = cfg.focal
    k = np.arange(cfg.frame_count)
    v = (cfg.width - 1) / 2.0 + f * (x - cfg.camera_speed * k) / z
    u = (cfg.height - 1) / 2.0 + f * y / z
    R = f * r / z
    dv = np.maximum(0.0, np.maximum(-v, v - (cfg.width - 1)))
    du = max(0.0, max(-u, u - (cfg.height - 1)))
    return int(np.count_nonzero(np.hypot(dv, du) <= R - 1.0))


def _place_row(
    rng: np.random.Generator,
    cfg: SceneConfig,
    depth: float,
    radii: Sequence[float],
    min_visible: int,
    placed: list[tuple[float, float, float]],
) -> list[tuple[float, float]]:
    """Rejection-sample disk centres on a fronto-parallel plane."""
    f = cfg.focal
    cx, cy = (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0
    travel = cfg.camera_speed * (cfg.frame_count - 1)
    out: list[tuple[float, float]] = []
    for r in radii:
        R = f * r / depth
        x_lo = (-cx - R) * depth / f
        x_hi = travel + (cfg.width - 1 - cx + R) * depth / f
        y_half = max((cy - R - 2.0) * depth / f, 0.0)
        for _ in range(20000):
            x = rng.uniform(x_lo, x_hi)
            y = rng.uniform(-y_half, y_half)
            if _frames_in_view(cfg, x, y, depth, r) < min_visible:
                continue
            if any(np.hypot(x - px, y - py) < 0.5 * cfg.min_separation * (r + pr) for px, py, pr in placed):
                continue
            placed.append((x, y, r))
            out.append((x, y))
            break
        else:
            raise ConfigInvalid(f"could not place {len(radii)} disks at depth {depth}; scene too crowded")
    return out


def _build_objects(rng: np.random.Generator, cfg: SceneConfig) -> list[SimObject]:
    n_decoy = int(round(cfg.decoy_fraction * cfg.fruit_count_front))

    def radii(n: int) -> np.ndarray:
        return cfg.fruit_radius * (1.0 + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter, n))

    front_r = radii(cfg.fruit_count_front)
    decoy_r = radii(n_decoy) * np.sqrt(cfg.decoy_area_factor)
    back_r = radii(cfg.fruit_count_back)

    objects: list[SimObject] = []
    placed: list[tuple[float, float, float]] = []
    # decoys first: they are the hardest to fit
    for (x, y), r in zip(_place_row(rng, cfg, cfg.row_depth_front, decoy_r, cfg.min_visible_frames, placed), decoy_r):
        objects.append(SimObject(0, np.array([x, y, cfg.row_depth_front]), float(r), FRONT, decoy=True))
    for (x, y), r in zip(_place_row(rng, cfg, cfg.row_depth_front, front_r, cfg.min_visible_frames, placed), front_r):
        objects.append(SimObject(0, np.array([x, y, cfg.row_depth_front]), float(r), FRONT))
    placed_back: list[tuple[float, float, float]] = []
    for (x, y), r in zip(_place_row(rng, cfg, cfg.row_depth_back, back_r, 1, placed_back), back_r):
        objects.append(SimObject(0, np.array([x, y, cfg.row_depth_back]), float(r), BACK))
    # ids in left-to-right order for readability
    objects.sort(key=lambda o: (o.position[0], o.position[1], o.position[2]))
    for i, o in enumerate(objects):
        o.id = i
    return objects


def _render(rng: np.random.Generator, cfg: SceneConfig, objects: list[SimObject], poses: list[CameraPose]):
    h, w = cfg.height, cfg.width
    intr = cfg.intrinsics
    bg_waves = _Waves.draw(rng, 12, cfg.texture_noise, (8.0, 40.0))
    obj_waves = [_Waves.draw(rng, 5, 0.6 * cfg.texture_noise, (6.0, 20.0)) for _ in objects]
    obj_base = rng.uniform(165.0, 200.0, len(objects))
    bg_shift_rate = cfg.focal * cfg.camera_speed / cfg.bg_depth
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    # farthest first so nearer disks overwrite
    paint_order = sorted(objects, key=lambda o: -o.position[2])

    frames, labels_maps = [], []
    for k, pose in enumerate(poses):
        img = 90.0 + bg_waves.grid(rows, cols + bg_shift_rate * k)
        lab = np.full((h, w), BACKGROUND, dtype=np.int32)
        for o in paint_order:
            (u0, v0), z = project(o.position, pose)
            R = intr.fx * o.radius / z
            r_lo, r_hi = max(0, int(np.ceil(u0 - R))), min(h - 1, int(np.floor(u0 + R)))
            c_lo, c_hi = max(0, int(np.ceil(v0 - R))), min(w - 1, int(np.floor(v0 + R)))
            if r_lo > r_hi or c_lo > c_hi:
                continue
            rr = rows[r_lo : r_hi + 1] - u0
            cc = cols[c_lo : c_hi + 1] - v0
            inside = rr[:, None] ** 2 + cc[None, :] ** 2 <= R * R
            if not inside.any():
                continue
            o.visible.append(k)
            patch = obj_base[o.id] + obj_waves[o.id].grid(rr, cc)
            view = img[r_lo : r_hi + 1, c_lo : c_hi + 1]
            view[inside] = patch[inside]
            lab[r_lo : r_hi + 1, c_lo : c_hi + 1][inside] = o.id
        frames.append(FrameImage(k, np.clip(np.rint(img), 0, 255).astype(np.uint8)))
        labels_maps.append(lab)
    return frames, labels_maps


def _apply_gaps(rng: np.random.Generator, cfg: SceneConfig, objects: list[SimObject]) -> None:
    if cfg.occlusion is None:
        return
    pool = [o for o in objects if o.counted and o.visible]
    n = int(round(cfg.occlusion.affected_fraction * len(pool)))
    if n == 0:
        return
    chosen = rng.choice(len(pool), size=n, replace=False)
    g = cfg.occlusion.gap_length
    for i in sorted(int(c) for c in chosen):
        o = pool[i]
        mid = o.visible[len(o.visible) // 2]
        o.gap = (mid - g // 2, mid - g // 2 + g - 1)


def _features(
    rng: np.random.Generator,
    cfg: SceneConfig,
    objects: list[SimObject],
    poses: list[CameraPose],
    label_maps: list[np.ndarray],
) -> tuple[list[FeatureTrack], dict[int, int]]:
    h, w = cfg.height, cfg.width
    lo, hi = cfg.feature_length
    seeds: list[tuple[int, np.ndarray, list[int]]] = []
    for o in objects:
        if not o.visible:
            continue
        for _ in range(cfg.features_per_fruit):
            rho = 0.9 * o.radius * np.sqrt(rng.uniform())
            phi = rng.uniform(0.0, 2 * np.pi)
            point = o.position + np.array([rho * np.cos(phi), rho * np.sin(phi), 0.0])
            seeds.append((o.id, point, o.visible))
    if cfg.background_features:
        zb = cfg.bg_depth
        travel = cfg.camera_speed * (cfg.frame_count - 1)
        span_x = (w / 2.0) * zb / cfg.focal
        span_y = (h / 2.0) * zb / cfg.focal
        all_frames = list(range(cfg.frame_count))
        for _ in range(cfg.background_features):
            point = np.array([rng.uniform(-span_x, travel + span_x), rng.uniform(-span_y, span_y), zb])
            seeds.append((BACKGROUND, point, all_frames))

    tracks: list[FeatureTrack] = []
    owner: dict[int, int] = {}
    for oid, point, frames in seeds:
        length = int(rng.integers(lo, hi + 1))
        start = frames[0] + int(rng.integers(0, max(1, len(frames) - length + 1)))
        window = range(start, min(start + length, frames[-1] + 1))
        noise = rng.normal(0.0, cfg.feature_noise, (len(window), 2)) if cfg.feature_noise > 0 else np.zeros((len(window), 2))
        obs = {}
        for (k, eps) in zip(window, noise):
            (u, v), _ = project(point, poses[k])
            r, c = int(round(u)), int(round(v))
            if not (0 <= r < h and 0 <= c < w) or label_maps[k][r, c] != oid:
                continue
            obs[k] = (u + eps[0], v + eps[1])
        if len(obs) >= 2:
            fid = len(tracks)
            tracks.append(FeatureTrack(fid, obs))
            owner[fid] = oid
    return tracks, owner


def _segments(cfg: SceneConfig, objects: list[SimObject]) -> list[Segment]:
    bounds = np.linspace(0, cfg.frame_count, cfg.segments + 1).round().astype(int)
    segs = []
    for i in range(cfg.segments):
        first, last = int(bounds[i]), int(bounds[i + 1]) - 1
        count = sum(1 for o in objects if o.counted and o.visible and first <= o.median_frame <= last)
        segs.append(Segment(f"seg{i}" if cfg.segments > 1 else "all", first, last, count))
    return segs


def generate(config: SceneConfig) -> SimulatedScene:
    """Build, render and annotate a scene. Deterministic in ``config.seed``.

    Raises:
        ConfigInvalid: the configuration is out of range or the requested
            fruit cannot be placed.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    poses = _poses(config)
    objects = _build_objects(rng, config)
    frames, label_maps = _render(rng, config, objects, poses)
    _apply_gaps(rng, config, objects)

    masks = []
    for k, lab in enumerate(label_maps):
        hidden = [o.id for o in objects if o.in_gap(k)]
        fruit = lab >= 0
        if hidden:
            fruit &= ~np.isin(lab, hidden)
        masks.append(FrameImage(k, np.where(fruit, 255, 0).astype(np.uint8)))

    labels = []
    for k, pose in enumerate(poses):
        circles = []
        for o in objects:
            if not o.counted or k not in o.visible:
                continue
            (u0, v0), z = project(o.position, pose)
            circles.append((v0, u0, config.focal * o.radius / z))
        labels.append(GroundTruthLabel(k, circles, float(config.width), float(config.height)))

    features, owner = _features(rng, config, objects, poses, label_maps)
    truth = GroundTruth(config, objects, poses, owner, _segments(config, objects))
    return SimulatedScene(frames, masks, truth, labels, features)


def write_dataset(scene: SimulatedScene, out_dir) -> DatasetManifest:
    """Write the scene in the layout :func:`fruitcount.ingest.load_dataset`
    reads, plus ``truth.json``."""
    out = Path(out_dir)
    seed = scene.truth.config.seed
    for sub in ("frames", "masks", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    frames, masks, labels = [], [], []
    for fr, mk, lb in zip(scene.frames, scene.masks, scene.labels):
        fp = out / "frames" / f"frame_{fr.index:05d}.png"
        mp = out / "masks" / f"mask_{mk.index:05d}.png"
        lp = out / "labels" / f"labels_{lb.frame:05d}.svg"
        write_png(fp, fr.pixels, seed)
        write_png(mp, mk.pixels, seed)
        write_svg_labels(lp, lb, seed)
        frames.append(fp)
        masks.append(mp)
        labels.append(lp)
    write_poses(out / "poses.txt", scene.poses, seed)
    write_feature_tracks(out / "features.txt", scene.features, seed)
    (out / "truth.json").write_text(json.dumps(scene.truth.to_json(), indent=1) + "\n")
    manifest = DatasetManifest(
        root=out,
        frames=frames,
        masks=masks,
        poses=out / "poses.txt",
        labels=labels,
        features=out / "features.txt",
        segments=list(scene.segments),
        seed=seed,
    )
    write_manifest(manifest, out / "manifest.json")
    return manifest


def generate_dataset(config: SceneConfig, out_dir) -> tuple[list[FrameImage], GroundTruth, DatasetManifest]:
    scene = generate(config)
    manifest = write_dataset(scene, out_dir)
    return scene.frames, scene.truth, manifest


def load_truth(path, poses: list[CameraPose]) -> GroundTruth:
    return GroundTruth.from_json(json.loads(Path(path).read_text()), poses)


# --------------------------------------------------------------------------
# ground-truth flow
# --------------------------------------------------------------------------


def true_flow(truth: GroundTruth, frame: int, point) -> tuple[float, float]:
    """Exact image displacement from ``frame`` to ``frame + 1`` of the
    object surface point under ``point``.

    Raises:
        PointNotOnFruit: no object covers ``point`` in ``frame``.
    """
    oid = truth.object_at(frame, point)
    if oid == BACKGROUND:
        raise PointNotOnFruit(f"frame {frame}: no object at {tuple(point)}")
    if frame + 1 >= len(truth.poses):
        raise PointNotOnFruit(f"frame {frame} is the last frame")
    obj = truth.objects[oid]
    pose0, pose1 = truth.poses[frame], truth.poses[frame + 1]
    depth = float(pose0.to_camera(obj.position)[2])
    world = backproject((float(point[0]), float(point[1])), depth, pose0)
    (u1, v1), _ = project(world, pose1)
    return u1 - point[0], v1 - point[1]


class GroundTruthFlow:
    """FlowProvider returning exact simulator flow; invalid off-fruit."""

    def __init__(self, truth: GroundTruth):
        self.truth = truth

    def __call__(self, prev, next, points, initial_guess=(0.0, 0.0)) -> list[FlowVector]:
        out = []
        for p in np.asarray(points, dtype=np.float64).reshape(-1, 2):
            try:
                out.append(FlowVector(true_flow(self.truth, prev.index, p), True))
            except PointNotOnFruit:
                out.append(FlowVector((0.0, 0.0), False))
        return out
