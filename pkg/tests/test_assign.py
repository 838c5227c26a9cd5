import itertools
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fruitcount.assign import CostMatrix, NonFiniteCost, hungarian, solve_assignment


def brute_force_min(C):
    """Exhaustive minimum over all maximum-cardinality matchings."""
    n, m = C.shape
    best = math.inf
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = min(best, math.fsum(C[i, c] for i, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = min(best, math.fsum(C[r, j] for j, r in enumerate(rows)))
    return best


def gated_oracle(C, gate):
    """Minimum of (sum of matched costs + gate per unmatched padded slot)
    over all partial matchings; over-gate pairs are never worth taking."""
    n, m = C.shape
    size = max(n, m)
    best = math.inf
    choices = [None, *range(m)]
    for assign in itertools.product(choices, repeat=n):
        cols = [c for c in assign if c is not None]
        if len(set(cols)) != len(cols):
            continue
        k = len(cols)
        total = math.fsum([*(min(C[i, c], gate) for i, c in enumerate(assign) if c is not None), gate * (size - k)])
        best = min(best, total)
    return best


def matched_cost(C, a):
    return math.fsum(C[r, c] for r, c in a.matches)


class TestExamples:
    def test_diagonal(self):
        a = solve_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]), gate=10)
        assert sorted(a.matches) == [(0, 0), (1, 1)]
        assert a.total_cost == 2.0

    def test_rectangular(self):
        a = solve_assignment(np.array([[1.0, 9, 9], [9, 1, 9]]), gate=10)
        assert sorted(a.matches) == [(0, 0), (1, 1)]
        assert a.unmatched_cols == [2] and a.unmatched_rows == []

    def test_gate_blocks_expensive_match(self):
        a = solve_assignment(np.array([[0.1, 5.0], [5.0, 5.0]]), gate=0.8)
        assert a.matches == [(0, 0)]
        assert a.unmatched_rows == [1] and a.unmatched_cols == [1]

    def test_empty(self):
        a = solve_assignment(np.zeros((0, 3)))
        assert a.matches == [] and a.unmatched_cols == [0, 1, 2]

    def test_nan_rejected(self):
        with pytest.raises(NonFiniteCost):
            solve_assignment(np.array([[np.nan]]))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            CostMatrix(np.array([[-1.0]]))

    def test_ties_deterministic(self):
        a = solve_assignment(np.ones((3, 3)), gate=10)
        b = solve_assignment(np.ones((3, 3)), gate=10)
        assert a.matches == b.matches == [(0, 0), (1, 1), (2, 2)]


class TestOracles:
    def test_brute_force_small(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n, m = rng.integers(1, 7, size=2)
            C = rng.uniform(size=(n, m))
            a = solve_assignment(C, gate=10.0)
            assert len(a.matches) == min(n, m)
            assert matched_cost(C, a) == brute_force_min(C)

    def test_gated_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n, m = rng.integers(1, 5, size=2)
            C = rng.uniform(0, 2, size=(n, m))
            a = solve_assignment(C, gate=0.8)
            assert a.padded_cost == pytest.approx(gated_oracle(C, 0.8), abs=1e-12)
            assert all(C[r, c] <= 0.8 for r, c in a.matches)

    def test_matches_scipy_cost(self):
        scipy_opt = pytest.importorskip("scipy.optimize")
        rng = np.random.default_rng(2)
        for n in (10, 40, 100):
            C = rng.uniform(size=(n, n))
            r, c = scipy_opt.linear_sum_assignment(C)
            assert C[np.arange(n), hungarian(C)].sum() == pytest.approx(C[r, c].sum(), abs=1e-9)

    def test_500_under_one_second(self):
        C = np.random.default_rng(3).uniform(size=(500, 500))
        t = time.perf_counter()
        col = hungarian(C)
        assert time.perf_counter() - t < 1.0
        assert sorted(col) == list(range(500))


cost_matrices = st.integers(1, 6).flatmap(
    lambda n: st.integers(1, 6).flatmap(
        lambda m: arrays(np.float64, (n, m), elements=st.floats(0, 3, allow_nan=False, width=32))
    )
)


class TestProperties:
    @settings(max_examples=150, deadline=None)
    @given(cost_matrices, st.floats(0.05, 3.0))
    def test_is_gated_matching(self, C, gate):
        a = solve_assignment(C, gate=gate)
        rows = [r for r, _ in a.matches]
        cols = [c for _, c in a.matches]
        assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
        assert all(C[r, c] <= gate for r, c in a.matches)
        assert sorted(rows + a.unmatched_rows) == list(range(C.shape[0]))
        assert sorted(cols + a.unmatched_cols) == list(range(C.shape[1]))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, lam):
        rng = np.random.default_rng(seed)
        n, m = rng.integers(1, 7, size=2)
        C = rng.uniform(size=(n, m))
        # a unique optimum is almost sure with continuous draws
        a = solve_assignment(C, gate=0.8)
        b = solve_assignment(C * lam, gate=0.8 * lam)
        assert a.matches == b.matches
