import numpy as np
import pytest

from mtsp_lab.policy import PolicyConfig, init_policy_params
from mtsp_lab.problem import Instance, generate_instance
from mtsp_lab.rng import Rng
from mtsp_lab.surrogate import SurrogateConfig, init_surrogate_params
from mtsp_lab.tsp import SolverConfig

TINY_POLICY = PolicyConfig(embed_dim=6, key_dim=4, query_dim=4, value_dim=4,
                           alloc_key_dim=4, message_rounds=1)
TINY_SURROGATE = SurrogateConfig(hidden_dim=8, layers=3)


@pytest.fixture
def solver_config():
    return SolverConfig()


@pytest.fixture
def tiny_instance():
    # 2 free cities, 2 agents: the smallest setting with a nontrivial split
    return generate_instance(n=3, m=2, seed=11)


@pytest.fixture
def small_instance():
    return generate_instance(n=8, m=2, seed=5)


@pytest.fixture
def tiny_policy_params():
    return init_policy_params(TINY_POLICY, num_agents=2, rng=Rng(42))


@pytest.fixture
def tiny_surrogate_params(tiny_instance):
    return init_surrogate_params(TINY_SURROGATE, n_free=2, m=2, rng=Rng(43))


def square_instance(m: int = 1) -> Instance:
    """Depot at a corner of the unit square, cities at the other corners."""
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]])
    return Instance(cities=pts, depot=0, num_agents=m, seed=0)
