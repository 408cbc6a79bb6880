"""Problem instances, tours, allocations, and the min-max objective.

An instance is N planar cities in the unit square, one of which (index 0 in
generated data) is the depot every agent starts from and returns to.  An
allocation partitions the non-depot cities among the M agents; the
objective is the length of the longest resulting tour.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    cities: np.ndarray          # (n, 2) float64, coordinates in [0, 1]
    depot: int
    num_agents: int
    seed: int
    dist: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cities = np.asarray(self.cities, dtype=np.float64)
        object.__setattr__(self, "cities", cities)
        if cities.ndim != 2 or cities.shape[1] != 2:
            raise ProblemError(f"cities must be (n, 2), got {cities.shape}")
        n = cities.shape[0]
        if n < 2:
            raise ProblemError("an instance needs at least one non-depot city")
        if not (0 <= self.depot < n):
            raise ProblemError(f"depot index {self.depot} out of range for n={n}")
        if self.num_agents < 1:
            raise ProblemError("num_agents must be >= 1")
        if cities.min() < 0.0 or cities.max() > 1.0:
            raise ProblemError("coordinates must lie in the unit square")
        diff = cities[:, None, :] - cities[None, :, :]
        object.__setattr__(self, "dist", np.sqrt((diff ** 2).sum(axis=2)))

    @property
    def n(self) -> int:
        return self.cities.shape[0]

    @property
    def free_cities(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n) if i != self.depot)


@dataclass(frozen=True)
class Tour:
    """City index sequence starting and ending at the depot."""
    order: tuple[int, ...]


@dataclass(frozen=True)
class Allocation:
    """Disjoint city groups, one per agent; empty groups are legal."""
    groups: tuple[tuple[int, ...], ...]


def generate_instance(n: int, m: int, seed: int) -> Instance:
    """n i.i.d. uniform cities in the unit square; depot is index 0."""
    if n < 2:
        raise ProblemError(f"need n >= 2 cities, got {n}")
    if m < 1:
        raise ProblemError(f"need m >= 1 agents, got {m}")
    coords = Rng(seed).random((n, 2))
    return Instance(cities=coords, depot=0, num_agents=m, seed=seed)


def validate_tour(tour: Tour, instance: Instance) -> None:
    order = tour.order
    if len(order) < 2 or order[0] != instance.depot or order[-1] != instance.depot:
        raise ProblemError(f"tour must start and end at depot {instance.depot}: {order}")
    interior = order[1:-1]
    if len(set(interior)) != len(interior):
        raise ProblemError("tour revisits a city")
    for c in interior:
        if not (0 <= c < instance.n) or c == instance.depot:
            raise ProblemError(f"invalid interior city {c}")


def validate_allocation(alloc: Allocation, instance: Instance) -> None:
    if len(alloc.groups) != instance.num_agents:
        raise ProblemError(
            f"allocation has {len(alloc.groups)} groups for {instance.num_agents} agents")
    seen: set[int] = set()
    for g in alloc.groups:
        for c in g:
            if not (0 <= c < instance.n) or c == instance.depot:
                raise ProblemError(f"invalid city {c} in allocation")
            if c in seen:
                raise ProblemError(f"city {c} allocated twice")
            seen.add(c)
    if seen != set(instance.free_cities):
        raise ProblemError("allocation does not cover all non-depot cities")


def tour_length(tour: Tour, instance: Instance) -> float:
    validate_tour(tour, instance)
    order = np.asarray(tour.order)
    return float(instance.dist[order[:-1], order[1:]].sum())


def minmax_objective(tours: list[Tour], instance: Instance) -> tuple[float, int]:
    """Longest tour length and the smallest agent index attaining it."""
    if len(tours) != instance.num_agents:
        raise ProblemError(f"expected {instance.num_agents} tours, got {len(tours)}")
    lengths = [tour_length(t, instance) for t in tours]
    best = max(lengths)
    return best, lengths.index(best)


# ---------------------------------------------------------------------------
# instance files
# ---------------------------------------------------------------------------
# JSON schema: {"n": int, "m": int, "depot": 0, "cities": [[x, y], ...],
# "seed": int}.  Coordinates are written as 17-significant-digit decimals so
# a write/read round trip is value-exact.

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def dumps_instance(instance: Instance) -> str:
    rows = ",\n    ".join(
        f"[{_fmt(x)}, {_fmt(y)}]" for x, y in instance.cities)
    return (
        "{\n"
        f'  "n": {instance.n},\n'
        f'  "m": {instance.num_agents},\n'
        f'  "depot": {instance.depot},\n'
        f'  "cities": [\n    {rows}\n  ],\n'
        f'  "seed": {instance.seed}\n'
        "}\n"
    )


def save_instance(instance: Instance, path) -> None:
    Path(path).write_text(dumps_instance(instance))


def load_instance(path) -> Instance:
    doc = json.loads(Path(path).read_text())
    cities = np.array(doc["cities"], dtype=np.float64)
    if cities.shape[0] != doc["n"]:
        raise ProblemError(f"{path}: city count {cities.shape[0]} != n={doc['n']}")
    return Instance(cities=cities, depot=int(doc["depot"]),
                    num_agents=int(doc["m"]), seed=int(doc["seed"]))


def total_pairwise_span(instance: Instance) -> float:
    """Diameter of the city set; handy scale reference for tolerances."""
    return float(instance.dist.max())


def euclid(a, b) -> float:
    return math.dist(a, b)
