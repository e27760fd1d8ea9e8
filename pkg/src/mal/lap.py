"""Exact maximum-weight linear assignment.

``solve_lap_max`` is a shortest-augmenting-path (Hungarian with potentials)
solver on the negated cost. ``brute_force_lap`` enumerates every injective map
and exists to check it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from mal.errors import NumericError, ShapeError, SizeError

BRUTE_FORCE_MAX = 8


@dataclass(frozen=True, eq=False)
class Assignment:
    """Injective map from ``source_dim`` columns into ``target_dim`` rows."""

    target_dim: int
    source_dim: int
    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.int64)
        if m.shape != (self.source_dim,) or self.source_dim > self.target_dim:
            raise ShapeError(f"assignment map {m.shape} does not fit {self.source_dim} -> {self.target_dim}")
        if len(m) and (m.min() < 0 or m.max() >= self.target_dim or len(np.unique(m)) != len(m)):
            raise ShapeError("assignment map is not injective into the target range")
        m.setflags(write=False)
        object.__setattr__(self, "map", m)

    def __eq__(self, other):
        return (isinstance(other, Assignment) and self.target_dim == other.target_dim
                and np.array_equal(self.map, other.map))

    def __hash__(self):
        return hash((self.target_dim, self.map.tobytes()))


def _check(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"cost must be a matrix, got shape {c.shape}")
    m, n = c.shape
    if m < n:
        raise ShapeError(f"cost must have at least as many rows as columns, got {m}x{n}")
    if not np.isfinite(c).all():
        raise NumericError("cost matrix has non-finite entries")
    return c


def assignment_value(cost, mapping) -> float:
    """Objective of ``mapping``: sum over columns j of cost[mapping[j], j]."""
    c = np.asarray(cost, dtype=np.float64)
    mapping = np.asarray(mapping, dtype=np.int64)
    return float(c[mapping, np.arange(len(mapping))].sum())


def _hungarian_min(a: np.ndarray) -> np.ndarray:
    """Min-cost assignment of every row of square ``a`` to a distinct column.

    Returns ``col_of_row``. Potentials-based shortest augmenting path, O(n^3);
    the inner column scan is vectorised and ties resolve to the lowest column.
    """
    n = a.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = none)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row


def solve_lap_max(cost) -> tuple[Assignment, float]:
    """Maximise sum_j cost[map[j], j] over injective ``map`` (cost is m x n, m >= n).

    A rectangular cost is padded with zero columns to m x m before solving;
    the padded columns take whatever rows are left over.
    """
    c = _check(cost)
    m, n = c.shape
    if n == 0:
        return Assignment(m, 0, np.zeros(0, dtype=np.int64)), 0.0
    square = np.zeros((m, m))
    square[:, :n] = c
    # algorithm rows are our source columns, algorithm columns are our target rows
    row_of_col = _hungarian_min(-square.T)[:n]
    return Assignment(m, n, row_of_col), assignment_value(c, row_of_col)


def brute_force_lap(cost) -> tuple[Assignment, float]:
    """Exhaustive maximum over all injective maps; only for n <= 8."""
    c = _check(cost)
    m, n = c.shape
    if n > BRUTE_FORCE_MAX:
        raise SizeError(f"brute force is limited to n <= {BRUTE_FORCE_MAX}, got n={n}")
    if n == 0:
        return Assignment(m, 0, np.zeros(0, dtype=np.int64)), 0.0
    best_map, best_val = None, -np.inf
    for perm in itertools.permutations(range(m), n):
        val = assignment_value(c, perm)
        if val > best_val:
            best_map, best_val = perm, val
    return Assignment(m, n, np.array(best_map)), best_val
