import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtsp_lab.problem import Instance, generate_instance, tour_length, validate_tour
from mtsp_lab.tsp import SolverConfig, SolverError, brute_force_tsp, solve_tsp
from tests.conftest import square_instance


def test_square_corners_optimal(solver_config):
    inst = square_instance()
    tour = solve_tsp({1, 2, 3}, inst, solver_config)
    assert tour_length(tour, inst) == pytest.approx(4.0)


def test_empty_group(solver_config):
    inst = square_instance()
    tour = solve_tsp(set(), inst, solver_config)
    assert tour.order == (0, 0)
    assert tour_length(tour, inst) == 0.0


def test_rejects_depot_and_bad_indices(solver_config):
    inst = square_instance()
    with pytest.raises(SolverError):
        solve_tsp({0, 1}, inst, solver_config)
    with pytest.raises(SolverError):
        solve_tsp({9}, inst, solver_config)


def test_deterministic(solver_config):
    inst = generate_instance(15, 1, seed=3)
    t1 = solve_tsp(inst.free_cities, inst, solver_config)
    t2 = solve_tsp(inst.free_cities, inst, solver_config)
    assert t1.order == t2.order


def test_two_opt_local_optimum(solver_config):
    inst = generate_instance(12, 1, seed=8)
    tour = solve_tsp(inst.free_cities, inst, solver_config)
    route = list(tour.order)
    best = tour_length(tour, inst)
    k = len(route) - 2
    for i in range(1, k):
        for j in range(i + 1, k + 1):
            cand = route[:i] + route[i:j + 1][::-1] + route[j + 1:]
            cand_len = tour_length(
                type(tour)(tuple(cand)), inst)
            assert cand_len >= best - 1e-9


def test_zero_passes_is_pure_nearest_neighbor():
    inst = generate_instance(10, 1, seed=21)
    raw = solve_tsp(inst.free_cities, inst, SolverConfig(max_two_opt_passes=0))
    refined = solve_tsp(inst.free_cities, inst, SolverConfig(max_two_opt_passes=40))
    assert tour_length(refined, inst) <= tour_length(raw, inst) + 1e-12


def test_brute_force_collinear():
    pts = np.array([[0.0, 0.5], [0.2, 0.5], [0.5, 0.5], [0.9, 0.5]])
    inst = Instance(cities=pts, depot=0, num_agents=1, seed=0)
    tour = brute_force_tsp({1, 2, 3}, inst, )
    assert tour.order == (0, 1, 2, 3, 0)
    assert tour_length(tour, inst) == pytest.approx(2 * 0.9)


def test_brute_force_square():
    inst = square_instance()
    tour = brute_force_tsp({1, 2, 3}, inst)
    assert tour_length(tour, inst) == pytest.approx(4.0)


def test_brute_force_size_refusal():
    inst = generate_instance(13, 1, seed=0)
    with pytest.raises(SolverError):
        brute_force_tsp(inst.free_cities, inst)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 7))
def test_heuristic_never_beats_oracle(seed, k):
    inst = generate_instance(k + 1, 1, seed)
    group = inst.free_cities
    heur = tour_length(solve_tsp(group, inst, SolverConfig()), inst)
    opt = tour_length(brute_force_tsp(group, inst), inst)
    assert heur >= opt - 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(0, 7))
def test_tour_always_feasible(seed, k):
    inst = generate_instance(max(k + 1, 2), 1, seed)
    group = inst.free_cities[:k]
    tour = solve_tsp(group, inst, SolverConfig())
    validate_tour(tour, inst)
    assert set(tour.order[1:-1]) == set(group)


def test_config_validation():
    with pytest.raises(SolverError):
        SolverConfig(max_two_opt_passes=-1)
    with pytest.raises(SolverError):
        SolverConfig(construction="greedy_edge")
