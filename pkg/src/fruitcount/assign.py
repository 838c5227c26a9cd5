"""Gated minimum-cost bipartite assignment (Hungarian algorithm)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_GATE = 0.8


class NonFiniteCost(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Track-by-detection costs with a gating ceiling."""

    costs: np.ndarray
    gate: float = DEFAULT_GATE

    def __post_init__(self) -> None:
        c = np.asarray(self.costs, dtype=np.float64)
        if c.ndim != 2:
            c = c.reshape(len(c), -1) if c.size else np.zeros((0, 0))
        if not np.all(np.isfinite(c)) or not np.isfinite(self.gate):
            raise NonFiniteCost("cost matrix and gate must be finite")
        if np.any(c < 0) or self.gate < 0:
            raise ValueError("costs and gate must be non-negative")
        object.__setattr__(self, "costs", c)

    @property
    def rows(self) -> int:
        return self.costs.shape[0]

    @property
    def cols(self) -> int:
        return self.costs.shape[1]


@dataclass
class Assignment:
    matches: list[tuple[int, int]]
    unmatched_rows: list[int]
    unmatched_cols: list[int]
    total_cost: float = 0.0
    padded_cost: float = field(default=0.0, repr=False)


def hungarian(costs: np.ndarray) -> np.ndarray:
    """Optimal assignment for a square cost matrix.

    Shortest-augmenting-path form with row/column potentials, O(n^3).
    Returns ``col_of_row``. Ties resolve toward the lowest column index.
    """
    C = np.asarray(costs, dtype=np.float64)
    n = C.shape[0]
    if C.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {C.shape}")
    # index 0 is a sentinel column / row
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.intp)
    col_of_row[row_of_col[1:] - 1] = np.arange(n)
    return col_of_row


def solve_assignment(m, gate: float | None = None) -> Assignment:
    """Match rows (tracks) to columns (detections) at minimum total cost.

    The matrix is padded to square with dummy entries at ``gate`` cost and
    real entries above the gate are treated as costing ``gate``, so an
    over-gate pairing is never preferred to leaving both sides unmatched.
    Matches whose real cost exceeds ``gate`` are reported as unmatched.

    Raises:
        NonFiniteCost: any cost or the gate is NaN or infinite.
    """
    if not isinstance(m, CostMatrix):
        m = CostMatrix(np.asarray(m, dtype=np.float64), DEFAULT_GATE if gate is None else gate)
    elif gate is not None:
        m = CostMatrix(m.costs, gate)
    nr, nc = m.rows, m.cols
    if nr == 0 or nc == 0:
        return Assignment([], list(range(nr)), list(range(nc)))
    n = max(nr, nc)
    padded = np.full((n, n), float(m.gate))
    padded[:nr, :nc] = np.minimum(m.costs, m.gate)
    col_of_row = hungarian(padded)

    matches = []
    for r in range(nr):
        c = int(col_of_row[r])
        if c < nc and m.costs[r, c] <= m.gate:
            matches.append((r, c))
    matched_rows = {r for r, _ in matches}
    matched_cols = {c for _, c in matches}
    return Assignment(
        matches=matches,
        unmatched_rows=[r for r in range(nr) if r not in matched_rows],
        unmatched_cols=[c for c in range(nc) if c not in matched_cols],
        total_cost=float(sum(m.costs[r, c] for r, c in matches)),
        padded_cost=float(padded[np.arange(n), col_of_row].sum()),
    )
