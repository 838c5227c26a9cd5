"""Count accuracy metrics: summed absolute error and signed percent error."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import CountReport

log = logging.getLogger(__name__)


class MissingSegment(KeyError):
    pass


@dataclass
class Evaluation:
    """Accuracy of one set of per-segment counts.

    ``errors_pct`` holds ``(estimate - truth) / truth * 100`` for segments
    with non-zero truth; the standard deviation is the population form.
    """

    l1: int
    errors_pct: dict[str, float]
    error_mean_pct: float
    error_std_pct: float
    count: int
    truth: int


def evaluate(counts: Mapping[str, int], truth: Mapping[str, int]) -> Evaluation:
    """Compare estimated counts with true visual counts, segment by segment.

    Segments with zero truth add to the L1 loss but are left out of the
    percent statistics.

    Raises:
        MissingSegment: the two mappings have different keys.
    """
    if set(counts) != set(truth):
        missing = sorted(set(counts) ^ set(truth))
        raise MissingSegment(f"segments present on only one side: {missing}")
    l1 = 0
    errors = {}
    for seg in sorted(counts):
        z, zt = int(counts[seg]), int(truth[seg])
        l1 += abs(z - zt)
        if zt == 0:
            log.warning("segment %s has zero ground truth; excluded from percent error", seg)
            continue
        errors[seg] = (z - zt) / zt * 100.0
    vals = np.array(list(errors.values()), dtype=np.float64)
    mean = float(vals.mean()) if len(vals) else 0.0
    std = float(vals.std()) if len(vals) else 0.0
    return Evaluation(l1, errors, mean, std, int(sum(counts.values())), int(sum(truth.values())))


@dataclass
class EvaluationSummary:
    reports: list[CountReport]
    raw: Evaluation | None = None
    corrected: Evaluation | None = None
    meta: dict = field(default_factory=dict)

    @property
    def raw_total(self) -> int:
        return sum(r.raw_count for r in self.reports)

    @property
    def corrected_total(self) -> int:
        return sum(r.corrected_count for r in self.reports)

    def to_json(self) -> dict:
        def ev(e: Evaluation | None):
            if e is None:
                return None
            return {
                "l1": e.l1,
                "count": e.count,
                "truth": e.truth,
                "error_mean_pct": e.error_mean_pct,
                "error_std_pct": e.error_std_pct,
                "errors_pct": e.errors_pct,
            }

        return {
            **self.meta,
            "std_convention": "population",
            "error_convention": "(estimate - truth) / truth * 100",
            "raw_total": self.raw_total,
            "corrected_total": self.corrected_total,
            "raw": ev(self.raw),
            "corrected": ev(self.corrected),
            "segments": [
                {
                    "segment": r.segment_id,
                    "raw": r.raw_count,
                    "corrected": r.corrected_count,
                    "truth": r.ground_truth,
                    "l1_raw": r.l1_raw,
                    "l1_corrected": r.l1_corrected,
                    "rejected": r.rejected,
                }
                for r in self.reports
            ],
        }


def summarize(reports: Sequence[CountReport], meta: dict | None = None) -> EvaluationSummary:
    """Aggregate per-segment reports; metrics only when every segment has truth."""
    reports = list(reports)
    summary = EvaluationSummary(reports, meta=dict(meta or {}))
    if reports and all(r.ground_truth is not None for r in reports):
        truth = {r.segment_id: r.ground_truth for r in reports}
        summary.raw = evaluate({r.segment_id: r.raw_count for r in reports}, truth)
        summary.corrected = evaluate({r.segment_id: r.corrected_count for r in reports}, truth)
    return summary
