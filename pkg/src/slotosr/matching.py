"""Optimal one-to-one assignment between slot predictions and padded labels.

Two independent routes: ``hungarian`` (shortest-augmenting-path with dual
potentials, O(N^3)) and ``brute_force_assign`` (exhaustive, N <= 8).  Both
resolve ties to the lexicographically smallest permutation, so they are
comparable entry-for-entry in tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Assignment:
    """perm[i] is the label column assigned to slot row i; total re-summed row order."""

    perm: tuple
    total: float


def _check_square(cost, op):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"{op}: cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError(f"{op}: cost matrix must be finite")
    return cost


def _row_total(cost, perm):
    total = 0.0
    for i, j in enumerate(perm):
        total += cost[i][j]
    return total


def _solve_min_cost(a, n):
    """Shortest augmenting path with potentials; returns (col_to_row, u, v).

    Maintains u[i] + v[j] <= a[i-1][j-1] with equality on matched edges
    (1-indexed; index 0 is the virtual unmatched slot).
    """
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
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
            row = a[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui0 - v[j]
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
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return p, u, v


def _can_complete(adj, used_cols, start_row, n):
    """Kuhn's check: rows start_row..n-1 all matchable into unused columns."""
    match_col = [-1] * n

    def try_row(i, visited):
        for j in adj[i]:
            if used_cols[j] or visited[j]:
                continue
            visited[j] = True
            if match_col[j] < 0 or try_row(match_col[j], visited):
                match_col[j] = i
                return True
        return False

    for i in range(start_row, n):
        if not try_row(i, [False] * n):
            return False
    return True


def hungarian(cost):
    """Globally minimal assignment; ties broken to the lexicographically smallest perm."""
    c = _check_square(cost, "hungarian")
    n = c.shape[0]
    a = c.tolist()
    p, u, v = _solve_min_cost(a, n)

    # Tight edges (zero reduced cost up to float noise) carry every optimal
    # assignment; any perfect matching inside them is optimal by complementary
    # slackness.  Pick the lexicographically smallest one.
    scale = max(1.0, float(np.abs(c).max()))
    tol = 1e-11 * scale
    tight = c - np.asarray(u[1:])[:, None] - np.asarray(v[1:])[None, :] <= tol

    if int(tight.sum()) == n:
        # unique candidate per row: the solver's own matching, already minimal
        perm = [0] * n
        for j in range(1, n + 1):
            perm[p[j] - 1] = j - 1
        return Assignment(tuple(perm), _row_total(a, perm))

    adj = [list(np.nonzero(tight[i])[0]) for i in range(n)]
    used_cols = [False] * n
    perm = [-1] * n
    for i in range(n):
        for j in adj[i]:
            if used_cols[j]:
                continue
            used_cols[j] = True
            perm[i] = j
            if _can_complete(adj, used_cols, i + 1, n):
                break
            used_cols[j] = False
            perm[i] = -1
        if perm[i] < 0:
            raise RuntimeError("hungarian: tight subgraph lost a perfect matching")
    return Assignment(tuple(perm), _row_total(a, perm))


def brute_force_assign(cost):
    """Exhaustive minimum over all permutations; strict improvement keeps the
    first (lexicographically smallest) optimum.  Test oracle; N <= 8 only."""
    c = _check_square(cost, "brute_force_assign")
    n = c.shape[0]
    if n > 8:
        raise ValueError(f"brute_force_assign: N={n} exceeds the N<=8 oracle limit")
    a = c.tolist()
    best_perm = None
    best_total = float("inf")
    for perm in itertools.permutations(range(n)):
        total = 0.0
        for i, j in enumerate(perm):
            total += a[i][j]
        if total < best_total:
            best_total = total
            best_perm = perm
    return Assignment(tuple(best_perm), _row_total(a, best_perm))
