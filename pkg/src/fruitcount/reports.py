"""Report files written by a counting run.

Everything is plain CSV / JSON / JSONL with deterministic formatting (floats
via ``repr``, sorted keys where order is not meaningful) so reruns with the
same inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

from .core import Fruit3D, FruitFlag, FruitTrack
from .evaluate import EvaluationSummary

COUNTS_HEADER = ["segment", "raw", "corrected", "truth", "error_pct"]
FRUITS_HEADER = ["track_id", "segment", "x", "y", "z", "depth", "rel_size", "flags"]
HIST_HEADER = ["bin_lower", "bin_upper", "count", "count_kept"]
HIST_WIDTH = 0.25
HIST_TOP = 6.0


class IoFailure(OSError):
    pass


def _num(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _flags(f: Fruit3D) -> str:
    return "|".join(sorted(flag.value for flag in f.flags))


def size_histogram(fruits: Sequence[Fruit3D]) -> list[tuple[float, float, int, int]]:
    """Relative-size histogram of localized, non-duplicate fruit.

    Fixed bins of width 0.25 up to 6, then one open bin. ``count_kept``
    excludes fruit rejected by a later pass.
    """
    n_bins = int(HIST_TOP / HIST_WIDTH)
    counts = [0] * (n_bins + 1)
    kept = [0] * (n_bins + 1)
    for f in fruits:
        if not f.localized or FruitFlag.DUPLICATE in f.flags:
            continue
        idx = min(int(f.rel_size // HIST_WIDTH), n_bins)
        counts[idx] += 1
        if not f.rejected:
            kept[idx] += 1
    rows = []
    for i in range(n_bins + 1):
        lower = i * HIST_WIDTH
        upper = (i + 1) * HIST_WIDTH if i < n_bins else math.inf
        rows.append((lower, upper, counts[i], kept[i]))
    return rows


def emit_reports(
    summary: EvaluationSummary,
    fruits: Sequence[Fruit3D],
    tracks: Sequence[FruitTrack],
    out_dir,
    segment_of: Mapping[int, str] | None = None,
) -> list[Path]:
    """Write counts.csv, fruits3d.csv, sizes_histogram.csv, tracks.jsonl and
    summary.json into ``out_dir``.

    Raises:
        IoFailure: the directory cannot be created or written.
    """
    out = Path(out_dir)
    segment_of = segment_of or {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []

        p = out / "counts.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COUNTS_HEADER)
            for r in summary.reports:
                err = ""
                if r.ground_truth:
                    err = repr((r.corrected_count - r.ground_truth) / r.ground_truth * 100.0)
                truth = "" if r.ground_truth is None else r.ground_truth
                w.writerow([r.segment_id, r.raw_count, r.corrected_count, truth, err])
        paths.append(p)

        p = out / "fruits3d.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FRUITS_HEADER)
            for f in sorted(fruits, key=lambda f: f.track_id):
                pos = f.position if f.position is not None else (None, None, None)
                w.writerow(
                    [
                        f.track_id,
                        segment_of.get(f.track_id, ""),
                        *(_num(x) for x in pos),
                        _num(f.depth) if f.localized else "",
                        _num(f.rel_size) if f.localized else "",
                        _flags(f),
                    ]
                )
        paths.append(p)

        p = out / "sizes_histogram.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HIST_HEADER)
            for lower, upper, n, k in size_histogram(fruits):
                w.writerow([repr(lower), "inf" if math.isinf(upper) else repr(upper), n, k])
        paths.append(p)

        p = out / "tracks.jsonl"
        with p.open("w") as fh:
            for t in sorted(tracks, key=lambda t: t.id):
                rec = {
                    "id": t.id,
                    "status": t.status.value,
                    "age": t.age,
                    "segment": segment_of.get(t.id),
                    "observations": [
                        {"frame": f, "u": r.centroid[0], "v": r.centroid[1], "box": list(r.box), "area": r.area}
                        for f, r in t.observations.items()
                    ],
                }
                fh.write(json.dumps(rec) + "\n")
        paths.append(p)

        p = out / "summary.json"
        p.write_text(json.dumps(summary.to_json(), indent=2, sort_keys=True) + "\n")
        paths.append(p)
    except OSError as exc:
        raise IoFailure(f"cannot write reports to {out}: {exc}") from exc
    return paths


def read_fruits_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def read_counts_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
