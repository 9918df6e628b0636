"""Exact minimum-cost rectangular assignment.

solve_hungarian is an O(n^3) Jonker-Volgenant-style shortest-augmenting-path
solver; solve_bruteforce enumerates every injective column->row map and is
the verification oracle for small instances. Matrices are n_q x n_y with
n_q >= n_y (queries at least as numerous as labels); rectangular inputs are
padded square with zero-cost dummy columns, which cannot change which real
assignment is optimal since every dummy column is used exactly once.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InfeasibleError

BRUTE_FORCE_LIMIT = 8


@dataclass
class CostMatrix:
    """Finite float64 matching costs, one row per query, one column per label."""

    cost: np.ndarray

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        if self.cost.ndim != 2:
            raise ContractError(f"cost matrix must be 2-D, got shape {self.cost.shape}")
        if self.cost.shape[0] < 1:
            raise ContractError("cost matrix needs at least one row")
        if self.cost.size and not np.all(np.isfinite(self.cost)):
            raise ContractError("cost matrix contains non-finite entries")

    @property
    def n_rows(self) -> int:
        return self.cost.shape[0]

    @property
    def n_cols(self) -> int:
        return self.cost.shape[1]


@dataclass
class Assignment:
    """Selected (row, col) pairs covering every column exactly once."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0


def _check_feasible(c: CostMatrix):
    if c.n_rows < c.n_cols:
        raise InfeasibleError(
            f"need rows >= cols, got {c.n_rows} x {c.n_cols}")


def solve_hungarian(c: CostMatrix) -> Assignment:
    """Minimum-cost assignment of every column to a distinct row."""
    _check_feasible(c)
    n_rows, n_cols = c.n_rows, c.n_cols
    if n_cols == 0:
        return Assignment([], 0.0)

    # Pad to square with zero-cost dummy columns (1-indexed working copy).
    n = n_rows
    a = [[0.0] * (n + 1) for _ in range(n + 1)]
    for i in range(n_rows):
        row = a[i + 1]
        for j in range(n_cols):
            row[j + 1] = c.cost[i, j]

    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)      # p[j] = row matched to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = a[i0][j] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    pairs = sorted((p[j + 1] - 1, j) for j in range(n_cols))
    total = float(sum(c.cost[r, col] for r, col in pairs))
    return Assignment(pairs, total)


def solve_bruteforce(c: CostMatrix) -> Assignment:
    """Exhaustive oracle; ties break to the lexicographically smallest
    column-indexed row tuple."""
    _check_feasible(c)
    if c.n_cols > BRUTE_FORCE_LIMIT:
        raise ContractError(
            f"brute force capped at {BRUTE_FORCE_LIMIT} columns, got {c.n_cols}")
    if c.n_cols == 0:
        return Assignment([], 0.0)
    best_rows = None
    best_cost = math.inf
    for rows in itertools.permutations(range(c.n_rows), c.n_cols):
        total = 0.0
        for col, row in enumerate(rows):
            total += c.cost[row, col]
        if total < best_cost:
            best_cost = total
            best_rows = rows
    pairs = sorted((row, col) for col, row in enumerate(best_rows))
    return Assignment(pairs, float(best_cost))
