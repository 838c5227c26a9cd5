import logging

import pytest

from fruitcount.core import CountReport
from fruitcount.evaluate import MissingSegment, evaluate, summarize


class TestEvaluate:
    @pytest.mark.parametrize("z,truth,l1", [(4049, 3456, 593), (8622, 7949, 673)])
    def test_published_uncorrected_cells(self, z, truth, l1):
        # every tree over-counts before correction, so the per-tree L1 equals
        # the difference of the published totals
        ev = evaluate({"all": z}, {"all": truth})
        assert ev.l1 == l1
        assert (ev.count, ev.truth) == (z, truth)

    @pytest.mark.parametrize("z,truth,l1", [(3449, 3456, 203), (8215, 7949, 322)])
    def test_published_corrected_cells_bounded_by_totals(self, z, truth, l1):
        # corrected per-tree errors have mixed signs; the totals only give the
        # lower bound |sum z - sum truth| <= L1
        ev = evaluate({"all": z}, {"all": truth})
        assert ev.l1 == abs(z - truth) <= l1

    def test_l1_sums_segments(self):
        ev = evaluate({"t1": 12, "t2": 7}, {"t1": 10, "t2": 10})
        assert ev.l1 == 5

    def test_perfect(self):
        ev = evaluate({"a": 5, "b": 7}, {"a": 5, "b": 7})
        assert (ev.l1, ev.error_mean_pct, ev.error_std_pct) == (0, 0.0, 0.0)

    def test_symmetric_pair(self):
        ev = evaluate({"a": 11, "b": 9}, {"a": 10, "b": 10})
        assert ev.error_mean_pct == pytest.approx(0.0)
        assert ev.error_std_pct == pytest.approx(10.0)
        assert ev.errors_pct == {"a": pytest.approx(10.0), "b": pytest.approx(-10.0)}

    def test_missing_segment(self):
        with pytest.raises(MissingSegment):
            evaluate({"a": 1}, {"b": 1})

    def test_zero_truth_excluded_from_percent(self, caplog):
        with caplog.at_level(logging.WARNING):
            ev = evaluate({"a": 3, "b": 12}, {"a": 0, "b": 10})
        assert ev.l1 == 5
        assert ev.errors_pct == {"b": pytest.approx(20.0)}
        assert "zero ground truth" in caplog.text


class TestSummary:
    def test_totals_are_sums(self):
        reports = [CountReport("a", 10, 8, 9), CountReport("b", 5, 5, 6)]
        s = summarize(reports)
        assert (s.raw_total, s.corrected_total) == (15, 13)
        assert s.raw.l1 == 1 + 1 and s.corrected.l1 == 1 + 1
        doc = s.to_json()
        assert doc["std_convention"] == "population"
        assert [seg["segment"] for seg in doc["segments"]] == ["a", "b"]

    def test_no_metrics_without_truth(self):
        s = summarize([CountReport("a", 3, 3)])
        assert s.raw is None and s.to_json()["raw"] is None
