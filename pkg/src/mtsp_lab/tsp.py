"""Single-agent TSP: nearest-neighbor construction plus 2-opt improvement,
and an exhaustive oracle for small groups.

The heuristic stands in for an external routing library as the lower-level
solver: given the cities assigned to one agent it returns a closed tour
through the depot.  It is deterministic for a fixed (group, instance,
config) and terminates at a 2-opt local optimum unless the pass or time
budget runs out first.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .problem import Instance, Tour


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    construction: str = "nearest_neighbor"
    improvement: str = "two_opt"
    max_two_opt_passes: int = 40
    time_budget_ms: float | None = None
    rng_seed: int = 0  # reserved; the NN + 2-opt pipeline draws no randomness

    def __post_init__(self):
        if self.construction != "nearest_neighbor":
            raise SolverError(f"unknown construction {self.construction!r}")
        if self.improvement != "two_opt":
            raise SolverError(f"unknown improvement {self.improvement!r}")
        if self.max_two_opt_passes < 0:
            raise SolverError("max_two_opt_passes must be >= 0")


def _check_group(group, instance: Instance) -> list[int]:
    cities = sorted(set(int(c) for c in group))
    for c in cities:
        if not (0 <= c < instance.n):
            raise SolverError(f"city index {c} out of range")
        if c == instance.depot:
            raise SolverError("depot cannot appear in a group")
    return cities


def _nearest_neighbor(cities: list[int], depot: int, dist: np.ndarray) -> list[int]:
    remaining = list(cities)  # ascending, so ties resolve to the lowest index
    order = []
    cur = depot
    while remaining:
        d = dist[cur, remaining]
        nxt = remaining.pop(int(np.argmin(d)))
        order.append(nxt)
        cur = nxt
    return order


def _two_opt(order: list[int], depot: int, dist: np.ndarray,
             max_passes: int, deadline: float | None) -> list[int]:
    # first-improvement over a fixed (i, j) scan; a pass with no accepted
    # move means a 2-opt local optimum
    k = len(order)
    if k < 2:
        return order
    route = [depot] + order + [depot]
    for _ in range(max_passes):
        improved = False
        for i in range(1, k):
            for j in range(i + 1, k + 1):
                a, b = route[i - 1], route[i]
                c, d = route[j], route[j + 1]
                delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
                if delta < -1e-12:
                    route[i:j + 1] = route[i:j + 1][::-1]
                    improved = True
        if not improved:
            break
        if deadline is not None and time.perf_counter() > deadline:
            break
    return route[1:-1]


def solve_tsp(group, instance: Instance, config: SolverConfig) -> Tour:
    """Heuristic tour over depot + group (nearest neighbor, then 2-opt)."""
    cities = _check_group(group, instance)
    if not cities:
        return Tour((instance.depot, instance.depot))
    deadline = None
    if config.time_budget_ms is not None:
        deadline = time.perf_counter() + config.time_budget_ms / 1000.0
    order = _nearest_neighbor(cities, instance.depot, instance.dist)
    order = _two_opt(order, instance.depot, instance.dist,
                     config.max_two_opt_passes, deadline)
    return Tour((instance.depot, *order, instance.depot))


BRUTE_FORCE_LIMIT = 10


def brute_force_tsp(group, instance: Instance) -> Tour:
    """Globally optimal tour by exhaustive permutation enumeration.

    Ties (within 1e-12 of the optimum) resolve to the lexicographically
    smallest visiting order.  Refuses groups larger than 10 cities.
    """
    cities = _check_group(group, instance)
    k = len(cities)
    if k > BRUTE_FORCE_LIMIT:
        raise SolverError(f"brute force limited to {BRUTE_FORCE_LIMIT} cities, got {k}")
    if not cities:
        return Tour((instance.depot, instance.depot))

    perms = np.array(list(itertools.permutations(range(k))), dtype=np.int8)
    nodes = np.array(cities)
    depot = instance.depot
    dist = instance.dist
    routes = nodes[perms]                                   # (k!, k)
    lengths = dist[depot, routes[:, 0]] + dist[routes[:, -1], depot]
    for t in range(k - 1):
        lengths = lengths + dist[routes[:, t], routes[:, t + 1]]
    best = lengths.min()
    tied = np.flatnonzero(lengths <= best + 1e-12)
    # lexicographically smallest optimal visiting order
    winner = tied[np.lexsort(routes[tied].T[::-1])][0]
    return Tour((depot, *(int(c) for c in routes[winner]), depot))
