"""End-to-end counting: masks -> regions -> tracks -> 3D -> corrected counts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .core import CameraPose, CountReport, FrameImage, Fruit3D, FruitFlag, FruitTrack, Region
from .correct import apply_corrections, corrected_count, merge_radius
from .evaluate import EvaluationSummary, summarize
from .flow import LucasKanadeFlow
from .ingest import DatasetManifest, Segment, load_dataset, load_poses, mask_to_regions, read_image
from .localize import (
    FeatureTrack,
    associate_features,
    feature_sufficiency,
    load_feature_tracks,
    localize_fruit,
    restrict_to_mask,
    triangulate_all,
)
from .reports import emit_reports
from .simulate import GroundTruth, GroundTruthFlow, SimulatedScene, load_truth
from .track import Tracker, age_threshold

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A failure attributed to one pipeline stage."""

    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


class SequenceSource:
    """Frames, masks and side data for one sequence."""

    n_frames: int
    poses: list[CameraPose] | None
    features: list[FeatureTrack] | None
    segments: list[Segment]
    truth: GroundTruth | None = None

    def frame(self, k: int) -> FrameImage:
        raise NotImplementedError

    def mask(self, k: int) -> np.ndarray:
        raise NotImplementedError


class DiskSource(SequenceSource):
    """Lazily reads a dataset described by a manifest."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.n_frames = manifest.n_frames
        self.poses = load_poses(manifest.poses, manifest.n_frames) if manifest.poses else None
        self.features = load_feature_tracks(manifest.features) if manifest.features else None
        self.segments = list(manifest.segments)
        truth_path = manifest.root / "truth.json"
        self.truth = load_truth(truth_path, self.poses) if truth_path.is_file() and self.poses else None

    def frame(self, k: int) -> FrameImage:
        return read_image(self.manifest.frames[k], k)

    def mask(self, k: int) -> np.ndarray:
        return read_image(self.manifest.masks[k], k).pixels


class MemorySource(SequenceSource):
    def __init__(
        self,
        frames: Sequence[FrameImage],
        masks: Sequence,
        poses=None,
        features=None,
        segments: Sequence[Segment] = (),
        truth: GroundTruth | None = None,
    ):
        if len(frames) != len(masks):
            raise ValueError("frames and masks differ in length")
        self._frames = list(frames)
        self._masks = [m.pixels if isinstance(m, FrameImage) else np.asarray(m) for m in masks]
        self.n_frames = len(self._frames)
        self.poses = list(poses) if poses is not None else None
        self.features = list(features) if features is not None else None
        self.segments = list(segments)
        self.truth = truth

    @classmethod
    def from_scene(cls, scene: SimulatedScene) -> "MemorySource":
        return cls(scene.frames, scene.masks, scene.poses, scene.features, scene.segments, scene.truth)

    def frame(self, k: int) -> FrameImage:
        return self._frames[k]

    def mask(self, k: int) -> np.ndarray:
        return self._masks[k]


@dataclass
class PipelineResult:
    summary: EvaluationSummary
    counted: list[FruitTrack]
    tracks: list[FruitTrack]
    fruits: list[Fruit3D]
    segment_of: dict[int, str]
    age_threshold: int
    overlap_frames: int
    diagnostics: dict = field(default_factory=dict)
    report_paths: list[Path] = field(default_factory=list)


def median_frame(track: FruitTrack) -> int:
    frames = track.frames
    return frames[(len(frames) - 1) // 2]


def assign_segments(tracks: Sequence[FruitTrack], segments: Sequence[Segment]) -> dict[int, str]:
    """Segment of each track by its (lower) median observation frame."""
    out = {}
    for t in tracks:
        m = median_frame(t)
        for s in segments:
            if s.contains(m):
                out[t.id] = s.id
                break
    return out


def _stage(name: str):
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(name, exc) from exc
            return False

    return _Guard()


def _track(config: PipelineConfig, source: SequenceSource, regions_by_frame: dict[int, list[Region]]):
    if config.flow_provider == "truth":
        if source.truth is None:
            raise ValueError("flow.provider = 'truth' needs simulator ground truth (truth.json)")
        flow = GroundTruthFlow(source.truth)
    else:
        flow = LucasKanadeFlow(config.flow)
    tcfg = config.tracker
    fixed = None
    if tcfg.overlap_frames is not None:
        fixed = age_threshold(tcfg.overlap_frames, tcfg.age_fraction, tcfg.min_count_age)
    tracker = Tracker(flow, config.kalman, tcfg, age_threshold=fixed)
    prev = None
    shape = None
    for k in range(source.n_frames):
        img = source.frame(k)
        shape = (img.height, img.width)
        if prev is None:
            tracker.start(regions_by_frame[k], k)
        else:
            tracker.step(regions_by_frame[k], prev, img)
        prev = img
    if tcfg.overlap_frames is not None:
        overlap = tcfg.overlap_frames
    else:
        # no fruit can stay in view longer than the sequence itself
        overlap = tracker.overlap_frames(shape[0], shape[1], default=source.n_frames) if shape else 1
        overlap = min(overlap, source.n_frames)
    threshold = age_threshold(overlap, tcfg.age_fraction, tcfg.min_count_age)
    counted = tracker.finalize(threshold)
    return tracker, counted, overlap, threshold


def _localize(config, source, counted, regions_by_frame, shape, diag) -> list[Fruit3D]:
    lcfg = config.localize
    features = source.features or []
    masked, per_frame = restrict_to_mask(features, regions_by_frame, shape, lcfg.masking.margin)
    counts = [per_frame.get(k, 0) for k in range(source.n_frames)]
    enough = feature_sufficiency(counts, lcfg.min_features_per_frame)
    diag["features_total"] = len(features)
    diag["features_fruit_adjacent"] = len(masked)
    diag["features_fallback_to_all"] = not enough
    used = masked if enough else features
    triangulated, failures = triangulate_all(used, source.poses, lcfg.reproj_threshold, lcfg.min_angle_deg)
    diag["features_triangulated"] = len(triangulated)
    diag["triangulation_failures"] = failures
    by_id = {ft.id: ft for ft in triangulated}
    assoc = associate_features(triangulated, counted)
    pose_map = {p.frame: p for p in source.poses}
    return [localize_fruit(t, [by_id[i] for i in assoc[t.id]], pose_map) for t in counted]


def run_pipeline(
    config: PipelineConfig,
    source: SequenceSource | DatasetManifest | str | Path,
    out_dir=None,
) -> PipelineResult:
    """Count fruit over a sequence and (optionally) write reports.

    Raises:
        PipelineError: with the failing stage name attached.
    """
    with _stage("ingest"):
        if isinstance(source, (str, Path)):
            source = load_dataset(source)
        if isinstance(source, DatasetManifest):
            source = DiskSource(source)
        segments = source.segments or [Segment("all", 0, source.n_frames - 1, None)]

    with _stage("regions"):
        regions_by_frame = {
            k: mask_to_regions(source.mask(k), config.min_area, frame=k) for k in range(source.n_frames)
        }

    with _stage("tracking"):
        tracker, counted, overlap, threshold = _track(config, source, regions_by_frame)

    diag: dict = {
        "frames": source.n_frames,
        "regions": sum(len(r) for r in regions_by_frame.values()),
        "tracks_created": tracker.total_created,
        "tracks_counted": len(counted),
        "overlap_frames": overlap,
        "age_threshold": threshold,
    }
    segment_of = assign_segments(counted, segments)
    unassigned = [t.id for t in counted if t.id not in segment_of]
    if unassigned:
        log.warning("%d counted tracks fall outside every segment", len(unassigned))

    fruits = [Fruit3D(t.id, None, flags={FruitFlag.UNLOCALIZED}) for t in counted]
    correction_ran = False
    if config.enable_correction:
        if source.poses is None or source.features is None:
            log.warning("correction requested but poses or feature tracks are missing; skipping")
        elif counted:
            with _stage("localize"):
                shape = (source.frame(0).height, source.frame(0).width)
                fruits = _localize(config, source, counted, regions_by_frame, shape, diag)
            with _stage("correct"):
                diag["merge_radius"] = merge_radius(fruits, config.correct)
                apply_corrections(fruits, counted, config.correct)
                correction_ran = True
    diag["correction_applied"] = correction_ran
    diag["fruits_localized"] = sum(1 for f in fruits if f.localized)

    with _stage("evaluate"):
        reports = []
        fruit_of = {f.track_id: f for f in fruits}
        for seg in segments:
            members = [fruit_of[t.id] for t in counted if segment_of.get(t.id) == seg.id]
            corrected, tallies = corrected_count(members, len(members))
            reports.append(CountReport(seg.id, len(members), corrected, seg.visual_count, tallies))
        meta = {"diagnostics": diag, "config": config.describe(), "seed": config.seed}
        summary = summarize(reports, meta)

    result = PipelineResult(summary, counted, tracker.all_tracks, fruits, segment_of, threshold, overlap, diag)
    if out_dir is not None:
        with _stage("report"):
            result.report_paths = emit_reports(summary, fruits, counted, out_dir, segment_of)
    return result
