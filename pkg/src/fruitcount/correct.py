"""Count correction from 3D fruit positions and relative sizes.

Passes run in a fixed order: duplicate merge, size outliers, depth outliers.
A fruit carries at most one rejection flag; each pass only considers fruits
no earlier pass has flagged, and cohort statistics use the same set.
Unlocalized fruits are never rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import Fruit3D, FruitFlag, FruitTrack
from .localize import NoLocalizedFruit, normalize_sizes


@dataclass(frozen=True)
class CorrectionConfig:
    size_lower: float = 0.5
    size_upper: float = 4.0
    depth_factor: float = 1.5
    merge_radius_factor: float = 0.5
    merge_radius_abs: float | None = None

    def __post_init__(self) -> None:
        if not 0 < self.size_lower < self.size_upper:
            raise ValueError("need 0 < size_lower < size_upper")
        if not self.depth_factor > 1:
            raise ValueError("depth_factor must exceed 1")
        if not self.merge_radius_factor > 0:
            raise ValueError("merge_radius_factor must be positive")
        if self.merge_radius_abs is not None and self.merge_radius_abs < 0:
            raise ValueError("merge_radius_abs must be non-negative")


def _eligible(f: Fruit3D) -> bool:
    return f.localized and not f.flags


def median_nn_distance(fruits: Sequence[Fruit3D]) -> float:
    """Median distance from each localized fruit to its nearest neighbour."""
    pts = np.array([f.position for f in fruits if f.localized], dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        return 0.0
    dist, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(dist[:, 1]))


def merge_radius(fruits: Sequence[Fruit3D], config: CorrectionConfig) -> float:
    if config.merge_radius_abs is not None:
        return config.merge_radius_abs
    return config.merge_radius_factor * median_nn_distance(fruits)


def merge_duplicates(fruits: Sequence[Fruit3D], tracks, radius: float) -> list[Fruit3D]:
    """Flag re-acquired tracks of the same fruit as Duplicate.

    Constrained single-link clustering: candidate pairs closer than
    ``radius`` are joined in order of increasing distance, but never when the
    two clusters contain tracks observed in a common frame (two tracks alive
    at once are different fruits). In each cluster the oldest track stays,
    ties going to the lower id.
    """
    tracks_by_id: Mapping[int, FruitTrack] = tracks if isinstance(tracks, Mapping) else {t.id: t for t in tracks}
    pool = [f for f in fruits if _eligible(f)]
    if len(pool) < 2 or radius <= 0:
        return list(fruits)
    pts = np.array([f.position for f in pool], dtype=np.float64)
    spans = [(tracks_by_id[f.track_id].first_frame, tracks_by_id[f.track_id].last_frame) for f in pool]

    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return list(fruits)
    d = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0], d))

    parent = list(range(len(pool)))
    members = {i: [i] for i in range(len(pool))}

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def overlaps(a: int, b: int) -> bool:
        return not (spans[a][1] < spans[b][0] or spans[b][1] < spans[a][0])

    for idx in order:
        a, b = (int(x) for x in pairs[idx])
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        if any(overlaps(i, j) for i in members[ra] for j in members[rb]):
            continue
        keep, drop = (ra, rb) if ra < rb else (rb, ra)
        parent[drop] = keep
        members[keep].extend(members.pop(drop))

    for group in members.values():
        if len(group) < 2:
            continue
        survivor = min(group, key=lambda i: (-tracks_by_id[pool[i].track_id].age, pool[i].track_id))
        for i in group:
            if i != survivor:
                pool[i].flags.add(FruitFlag.DUPLICATE)
    return list(fruits)


def reject_size_outliers(fruits: Sequence[Fruit3D], size_lower: float = 0.5, size_upper: float = 4.0) -> list[Fruit3D]:
    """SizeOutlier when relative size falls outside the inclusive bounds."""
    for f in fruits:
        if _eligible(f) and not size_lower <= f.rel_size <= size_upper:
            f.flags.add(FruitFlag.SIZE_OUTLIER)
    return list(fruits)


def reject_depth_outliers(fruits: Sequence[Fruit3D], depth_factor: float = 1.5) -> list[Fruit3D]:
    """DepthOutlier when a fruit's median depth exceeds ``depth_factor`` times
    the mean median depth of the unflagged cohort."""
    pool = [f for f in fruits if _eligible(f) and f.depths]
    if not pool:
        return list(fruits)
    reps = np.array([f.depth for f in pool])
    limit = depth_factor * float(reps.mean())
    for f, d in zip(pool, reps):
        if d > limit:
            f.flags.add(FruitFlag.DEPTH_OUTLIER)
    return list(fruits)


def corrected_count(fruits: Sequence[Fruit3D], raw_count: int) -> tuple[int, dict[str, int]]:
    """Raw count minus every rejected fruit, with per-flag tallies."""
    tallies = {flag.value: 0 for flag in (FruitFlag.DUPLICATE, FruitFlag.SIZE_OUTLIER, FruitFlag.DEPTH_OUTLIER)}
    for f in fruits:
        for flag in f.flags:
            if flag.value in tallies:
                tallies[flag.value] += 1
    return raw_count - sum(tallies.values()), tallies


def apply_corrections(
    fruits: Sequence[Fruit3D],
    tracks,
    config: CorrectionConfig | None = None,
    order: Sequence[str] = ("duplicates", "size", "depth"),
) -> list[Fruit3D]:
    """Run the correction passes in ``order`` (default: documented order).

    Sizes are normalised after the duplicate pass when it runs first, so
    duplicates do not weigh on the cohort mean. Existing rejection flags are
    cleared first, making the function idempotent.
    """
    cfg = config or CorrectionConfig()
    for f in fruits:
        f.flags &= {FruitFlag.UNLOCALIZED}
        if f.localized:
            f.rel_size = f.raw_size
    normalized = False

    def ensure_normalized() -> None:
        nonlocal normalized
        if not normalized:
            try:
                normalize_sizes(fruits)
            except NoLocalizedFruit:
                pass
            normalized = True

    for step in order:
        if step == "duplicates":
            merge_duplicates(fruits, tracks, merge_radius(fruits, cfg))
        elif step == "size":
            ensure_normalized()
            reject_size_outliers(fruits, cfg.size_lower, cfg.size_upper)
        elif step == "depth":
            reject_depth_outliers(fruits, cfg.depth_factor)
        else:
            raise ValueError(f"unknown correction pass {step!r}")
    ensure_normalized()
    return list(fruits)
