"""Frame-to-frame fruit tracking.

Each step follows the same loop: optical flow at every active track's
centroid (seeded with the track velocity), one Kalman predict/update with
a constant-velocity model, a box-normalised distance + overlap cost, gated
Hungarian assignment, then track bookkeeping. After assignment every track's
filter is re-initialised from its new detection and the frame's mean flow.
Tracks are counted once lost if they lived at least ``age_threshold`` frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assign import DEFAULT_GATE, solve_assignment
from .core import FrameImage, FruitTrack, Region, TrackState, TrackStatus, check_covariance
from .flow import FlowProvider, FlowVector, mean_flow

log = logging.getLogger(__name__)

# constant-velocity transition; observation is the full state
A = np.array(
    [
        [1.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)
H = np.eye(4)


class SingularInnovation(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class KalmanConfig:
    Q: np.ndarray = field(default_factory=lambda: np.diag([4.0, 1.0, 4.0, 1.0]))
    R: np.ndarray = field(default_factory=lambda: np.diag([2.0, 0.5, 2.0, 0.5]))
    P0: np.ndarray = field(default_factory=lambda: np.diag([10.0, 10.0, 25.0, 25.0]))

    def __post_init__(self) -> None:
        for name in ("Q", "R", "P0"):
            M = np.asarray(getattr(self, name), dtype=np.float64)
            if M.ndim == 1:
                M = np.diag(M)
            if M.shape != (4, 4):
                raise ValueError(f"{name} must be 4x4 or a 4-vector diagonal")
            check_covariance(M, name)
            object.__setattr__(self, name, M)


@dataclass(frozen=True)
class TrackerConfig:
    gate: float = DEFAULT_GATE
    age_fraction: float = 1.0 / 3.0
    min_count_age: int = 2
    overlap_frames: int | None = None

    def __post_init__(self) -> None:
        if not 0 < self.age_fraction <= 1:
            raise ValueError("age_fraction must lie in (0, 1]")
        if self.min_count_age < 1:
            raise ValueError("min_count_age must be >= 1")
        if self.overlap_frames is not None and self.overlap_frames < 1:
            raise ValueError("overlap_frames must be >= 1")
        if self.gate < 0:
            raise ValueError("gate must be non-negative")


# --------------------------------------------------------------------------
# Kalman filter
# --------------------------------------------------------------------------


def predict(state: TrackState, Q) -> TrackState:
    """A priori estimate: ``x = A x``, ``P = A P A^T + Q``."""
    P = A @ state.P @ A.T + np.asarray(Q, dtype=np.float64)
    return TrackState(A @ state.x, 0.5 * (P + P.T))


def update(prior: TrackState, z, R, H: np.ndarray = H) -> TrackState:
    """A posteriori estimate from measurement ``z``.

    The covariance uses the Joseph form, which keeps it symmetric PSD even
    when the gain is computed with round-off.

    Raises:
        SingularInnovation: if ``H P H^T + R`` cannot be inverted reliably.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    R = np.asarray(R, dtype=np.float64)
    S = H @ prior.P @ H.T + R
    S = 0.5 * (S + S.T)
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e14:
        raise SingularInnovation("innovation covariance is singular")
    # K = P H^T S^-1, solved rather than inverted
    K = np.linalg.solve(S, H @ prior.P.T).T
    x = prior.x + K @ (z - H @ prior.x)
    IKH = np.eye(len(prior.x)) - K @ H
    P = IKH @ prior.P @ IKH.T + K @ R @ K.T
    return TrackState(x, 0.5 * (P + P.T))


def build_measurement(flow: FlowVector, position, prev_mean_flow) -> np.ndarray:
    """``[u + d_u, v + d_v, mean_d_u, mean_d_v]``: flow-propagated position
    and last frame's mean flow as the velocity reading."""
    u, v = position
    du, dv = flow.d
    return np.array([u + du, v + dv, prev_mean_flow[0], prev_mean_flow[1]], dtype=np.float64)


# --------------------------------------------------------------------------
# association cost
# --------------------------------------------------------------------------


def box_extent(region: Region, shift=(0.0, 0.0)) -> tuple[float, float, float, float]:
    """Continuous (top, left, bottom, right) extent of a region's box."""
    r0, c0, r1, c1 = region.box
    return (r0 - 0.5 + shift[0], c0 - 0.5 + shift[1], r1 + 0.5 + shift[0], c1 + 0.5 + shift[1])


def box_overlap(a: tuple, b: tuple) -> float:
    """Intersection area over the smaller box area, in [0, 1]."""
    ih = min(a[2], b[2]) - max(a[0], b[0])
    iw = min(a[3], b[3]) - max(a[1], b[1])
    if ih <= 0 or iw <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return min(1.0, ih * iw / min(area_a, area_b))


def pair_cost(predicted, area_track: float, detected, area_det: float, overlap: float) -> float:
    """Squared centre distance over summed box areas, plus (1 - overlap)."""
    if not area_track + area_det > 0:
        raise ValueError("box areas must sum to a positive value")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError(f"overlap must lie in [0, 1], got {overlap}")
    du = predicted[0] - detected[0]
    dv = predicted[1] - detected[1]
    return (du * du + dv * dv) / (area_track + area_det) + (1.0 - overlap)


def cost_matrix(tracks: Sequence[FruitTrack], predictions: np.ndarray, regions: Sequence[Region]) -> np.ndarray:
    C = np.zeros((len(tracks), len(regions)))
    for i, trk in enumerate(tracks):
        last = trk.last
        shift = (predictions[i, 0] - last.centroid[0], predictions[i, 1] - last.centroid[1])
        moved = box_extent(last, shift)
        for j, reg in enumerate(regions):
            lam = box_overlap(moved, box_extent(reg))
            C[i, j] = pair_cost(predictions[i], last.box_area, reg.centroid, reg.box_area, lam)
    return C


# --------------------------------------------------------------------------
# counting threshold
# --------------------------------------------------------------------------


def age_threshold(overlap_frames: int, age_fraction: float = 1.0 / 3.0, min_count_age: int = 2) -> int:
    """Minimum age for a track to be counted: a fraction of the frames a
    point typically stays in view, floored at ``min_count_age``."""
    if overlap_frames < 1:
        raise ValueError("overlap_frames must be >= 1")
    return max(int(min_count_age), int(round(age_fraction * overlap_frames)))


def estimate_overlap_frames(frame_flows: Sequence[np.ndarray], height: int, width: int, default: int) -> int:
    """How many frames a typical point stays in view.

    ``frame_flows`` holds one (n, 2) array of valid (d_u, d_v) per frame
    pair. The travel axis is the one with the larger median |flow|; each
    frame contributes image extent along that axis over its median |flow|
    on that axis, and the median over frames is returned. Falls back to
    ``default`` when nothing moves.
    """
    nonempty = [np.asarray(f, dtype=np.float64).reshape(-1, 2) for f in frame_flows if len(f)]
    if not nonempty:
        return max(1, int(default))
    allf = np.abs(np.vstack(nonempty))
    axis = 0 if np.median(allf[:, 0]) > np.median(allf[:, 1]) else 1
    extent = height if axis == 0 else width
    per_frame = []
    for f in nonempty:
        m = float(np.median(np.abs(f[:, axis])))
        if m > 1e-9:
            per_frame.append(extent / m)
    if not per_frame:
        return max(1, int(default))
    return max(1, int(round(float(np.median(per_frame)))))


# --------------------------------------------------------------------------
# tracker
# --------------------------------------------------------------------------


class Tracker:
    """Single-owner track store driven one frame at a time.

    When ``age_threshold`` is None the count decision for lost tracks is
    deferred to :meth:`finalize`, which needs the threshold by then; the
    tracking itself never depends on the threshold.
    """

    def __init__(
        self,
        flow: FlowProvider,
        kalman: KalmanConfig | None = None,
        config: TrackerConfig | None = None,
        age_threshold: int | None = None,
    ):
        self.flow = flow
        self.kalman = kalman or KalmanConfig()
        self.config = config or TrackerConfig()
        self.age_threshold = age_threshold
        self.active: list[FruitTrack] = []
        self.counted: list[FruitTrack] = []
        self.discarded: list[FruitTrack] = []
        self.retired: list[FruitTrack] = []  # lost, awaiting a threshold
        self.next_id = 0
        self.prev_mean_flow = (0.0, 0.0)
        self.frame_flows: list[np.ndarray] = []
        self.frame_index: int | None = None
        self.finalized = False

    @property
    def total_created(self) -> int:
        return self.next_id

    @property
    def all_tracks(self) -> list[FruitTrack]:
        return sorted(self.active + self.counted + self.discarded + self.retired, key=lambda t: t.id)

    def _new_track(self, region: Region) -> FruitTrack:
        x = [region.centroid[0], region.centroid[1], self.prev_mean_flow[0], self.prev_mean_flow[1]]
        trk = FruitTrack(self.next_id, {region.frame: region}, TrackState(x, self.kalman.P0.copy()))
        self.next_id += 1
        return trk

    def _retire(self, trk: FruitTrack) -> None:
        if self.age_threshold is None:
            self.retired.append(trk)
        elif trk.age >= self.age_threshold:
            trk.set_status(TrackStatus.COUNTED)
            self.counted.append(trk)
        else:
            trk.set_status(TrackStatus.LOST)
            self.discarded.append(trk)

    def start(self, regions: Sequence[Region], frame_index: int = 0) -> None:
        """Open a Tentative track for every region of the first frame."""
        if self.frame_index is not None:
            raise RuntimeError("tracker already started")
        self.frame_index = frame_index
        self.active = [self._new_track(r) for r in regions]

    def step(self, regions: Sequence[Region], prev: FrameImage, next: FrameImage) -> None:
        """Advance from ``prev`` (frame k) to ``next`` (frame k+1)."""
        if self.frame_index is None:
            self.start(regions, next.index)
            return
        if self.finalized:
            raise RuntimeError("tracker already finalized")
        k1 = next.index
        tracks = self.active
        flows: list[FlowVector] = []
        if tracks:
            points = [t.last.centroid for t in tracks]
            guesses = np.array([t.state.velocity for t in tracks])
            flows = self.flow(prev, next, points, guesses)
        predictions = np.zeros((len(tracks), 2))
        for i, (trk, fl) in enumerate(zip(tracks, flows)):
            prior = predict(trk.state, self.kalman.Q)
            if fl.valid:
                z = build_measurement(fl, trk.last.centroid, self.prev_mean_flow)
                post = update(prior, z, self.kalman.R, H)
            else:
                post = prior
            trk.state = post
            predictions[i] = post.x[:2]

        result = solve_assignment(cost_matrix(tracks, predictions, regions), self.config.gate)
        survivors = []
        for i, j in result.matches:
            trk = tracks[i]
            trk.add(regions[j])
            if trk.age >= 2 and trk.status is TrackStatus.TENTATIVE:
                trk.set_status(TrackStatus.TRACKED)
            survivors.append(trk)
        for i in result.unmatched_rows:
            self._retire(tracks[i])

        valid = np.array([f.d for f in flows if f.valid], dtype=np.float64).reshape(-1, 2)
        self.frame_flows.append(valid)
        self.prev_mean_flow = mean_flow(flows)
        for trk in survivors:
            u, v = trk.last.centroid
            trk.state = TrackState([u, v, *self.prev_mean_flow], self.kalman.P0.copy())
        new = [self._new_track(regions[j]) for j in result.unmatched_cols]
        self.active = sorted(survivors + new, key=lambda t: t.id)
        self.frame_index = k1

    def finalize(self, age_threshold: int | None = None) -> list[FruitTrack]:
        """Flush active tracks and resolve deferred count decisions.

        Returns the counted tracks ordered by id.
        """
        if age_threshold is not None:
            self.age_threshold = age_threshold
        if self.age_threshold is None:
            raise ValueError("an age threshold is required to finalize")
        pending = self.retired + self.active
        self.retired = []
        self.active = []
        for trk in sorted(pending, key=lambda t: t.id):
            self._retire(trk)
        self.counted.sort(key=lambda t: t.id)
        self.discarded.sort(key=lambda t: t.id)
        self.finalized = True
        return list(self.counted)

    def overlap_frames(self, height: int, width: int, default: int) -> int:
        return estimate_overlap_frames(self.frame_flows, height, width, default)
