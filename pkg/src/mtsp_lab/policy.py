"""The allocation policy: graph embedding, attention, and city-to-agent
probabilities.

Forward pass, all on the autodiff tape:

1. city features start as a linear projection of coordinates and are
   refined by a few rounds of message passing over the fully connected
   city graph (edge feature = Euclidean distance, elementwise-mean
   aggregation over neighbors);
2. a context vector (mean of non-depot features ++ depot feature) is
   turned into per-agent queries; scaled dot-product attention over the
   non-depot cities yields one embedding per agent;
3. a second attention block scores every (city, agent) pair, squashes the
   scores through a clipped tanh, and a per-city softmax over agents gives
   the row-stochastic allocation matrix.

Each agent owns its query matrix in step 2; everything else is shared, so
the network is equivariant in the cities and (at a symmetric initial
point) in the agents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .problem import Allocation, Instance, ProblemError
from .rng import Rng


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 64
    key_dim: int = 16
    query_dim: int = 16
    value_dim: int = 16
    alloc_key_dim: int = 16
    score_clip: float = 10.0
    message_rounds: int = 2
    neighborhood: str = "full"

    def __post_init__(self):
        dims = (self.embed_dim, self.key_dim, self.query_dim,
                self.value_dim, self.alloc_key_dim)
        if any(d < 1 for d in dims):
            raise ValueError("all dimensions must be >= 1")
        if self.key_dim != self.query_dim:
            raise ValueError("attention key and query dims must match")
        if self.score_clip <= 0:
            raise ValueError("score_clip must be positive")
        if self.message_rounds < 0:
            raise ValueError("message_rounds must be >= 0")
        if self.neighborhood != "full":
            raise ValueError(f"unsupported neighborhood rule {self.neighborhood!r}")


@dataclass
class EmbeddingState:
    city: Tensor          # (n, embed_dim), depot row included
    city_free: Tensor     # (n_free, embed_dim), non-depot rows in index order
    graph: Tensor         # (1, embed_dim), mean over non-depot cities
    context: Tensor       # (1, 2*embed_dim) = [graph ++ depot feature]
    agents: Tensor | None = None   # (m, value_dim) once embed_agents ran


@dataclass
class AllocationMatrix:
    """Row-stochastic city-to-agent probabilities on the tape.

    ``probs`` rows follow ``cities`` (the non-depot indices in ascending
    order); ``scores`` holds the clipped pre-softmax importance values.
    """
    probs: Tensor                 # (n_free, m)
    scores: Tensor                # (n_free, m), bounded by the clip constant
    cities: tuple[int, ...]

    @property
    def values(self) -> np.ndarray:
        return self.probs.data

    def validate(self, tol: float = 1e-9) -> None:
        p = self.probs.data
        if p.min() < -tol:
            raise ProblemError("allocation matrix has negative entries")
        err = np.abs(p.sum(axis=1) - 1.0).max()
        if err > tol:
            raise ProblemError(f"allocation rows not normalized (err {err:.2e})")


# ---------------------------------------------------------------------------
# constant selector matrices, cached per (n, depot)
# ---------------------------------------------------------------------------

class _Selectors:
    def __init__(self, n: int, depot: int):
        pairs = [(i, k) for i in range(n) for k in range(n) if k != i]
        npairs = len(pairs)
        left = np.zeros((npairs, n))
        right = np.zeros((npairs, n))
        mean_back = np.zeros((n, npairs))
        for r, (i, k) in enumerate(pairs):
            left[r, i] = 1.0
            right[r, k] = 1.0
            mean_back[i, r] = 1.0 / (n - 1)
        free = [i for i in range(n) if i != depot]
        take_free = np.zeros((len(free), n))
        for r, i in enumerate(free):
            take_free[r, i] = 1.0
        graph_row = np.zeros((1, n))
        graph_row[0, free] = 1.0 / len(free)
        depot_row = np.zeros((1, n))
        depot_row[0, depot] = 1.0
        self.pairs = pairs
        self.left = ad.const(left)
        self.right = ad.const(right)
        self.mean_back = ad.const(mean_back)
        self.take_free = ad.const(take_free)
        self.graph_row = ad.const(graph_row)
        self.depot_row = ad.const(depot_row)
        self.free = tuple(free)


_selector_cache: dict[tuple[int, int], _Selectors] = {}


def _selectors(n: int, depot: int) -> _Selectors:
    key = (n, depot)
    if key not in _selector_cache:
        _selector_cache[key] = _Selectors(n, depot)
    return _selector_cache[key]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _linear_init(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def init_policy_params(config: PolicyConfig, num_agents: int, rng: Rng) -> ParamStore:
    """Fresh policy parameters; creation order fixes the store layout."""
    d = config.embed_dim
    store = ParamStore("policy")
    store.add("input_proj/w", _linear_init(rng.derive(0), 2, d))
    store.add("input_proj/b", np.zeros(d))
    store.add("msg/w", _linear_init(rng.derive(1), 2 * d + 1, d))
    store.add("msg/b", np.zeros(d))
    store.add("upd/w", _linear_init(rng.derive(2), 2 * d, d))
    store.add("upd/b", np.zeros(d))
    store.add("att_key/w", _linear_init(rng.derive(3), d, config.key_dim))
    store.add("att_val/w", _linear_init(rng.derive(4), d, config.value_dim))
    for j in range(num_agents):
        store.add(f"att_query/w{j}", _linear_init(rng.derive(5, j), 2 * d, config.query_dim))
    store.add("alloc_key/w", _linear_init(rng.derive(6), d, config.alloc_key_dim))
    store.add("alloc_query/w", _linear_init(rng.derive(7), config.value_dim, config.alloc_key_dim))
    return store


def num_agents_of(params: ParamStore) -> int:
    return sum(1 for n in params.names() if n.startswith("att_query/"))


def symmetrize_agents(params: ParamStore) -> None:
    """Copy agent 0's query into every agent (exact agent symmetry)."""
    w0 = params["att_query/w0"].data
    for name in params.names():
        if name.startswith("att_query/w") and name != "att_query/w0":
            np.copyto(params[name].data, w0)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def embed_cities(instance: Instance, params: ParamStore, config: PolicyConfig) -> EmbeddingState:
    sel = _selectors(instance.n, instance.depot)
    coords = ad.const(instance.cities)
    f = ad.add(ad.matmul(coords, params["input_proj/w"]), params["input_proj/b"])
    if config.message_rounds > 0:
        edge = ad.const(np.array([[instance.dist[i, k]] for i, k in sel.pairs]))
        for _ in range(config.message_rounds):
            sender = ad.matmul(sel.left, f)
            receiver = ad.matmul(sel.right, f)
            msg = ad.tanh(ad.add(
                ad.matmul(ad.concat([sender, receiver, edge], axis=1), params["msg/w"]),
                params["msg/b"]))
            agg = ad.matmul(sel.mean_back, msg)
            f = ad.tanh(ad.add(
                ad.matmul(ad.concat([f, agg], axis=1), params["upd/w"]),
                params["upd/b"]))
    graph = ad.matmul(sel.graph_row, f)
    depot_feat = ad.matmul(sel.depot_row, f)
    return EmbeddingState(
        city=f,
        city_free=ad.matmul(sel.take_free, f),
        graph=graph,
        context=ad.concat([graph, depot_feat], axis=1),
    )


def embed_agents(state: EmbeddingState, params: ParamStore,
                 config: PolicyConfig) -> EmbeddingState:
    m = num_agents_of(params)
    keys = ad.matmul(state.city_free, params["att_key/w"])        # (n_free, dk)
    values = ad.matmul(state.city_free, params["att_val/w"])      # (n_free, dv)
    queries = ad.concat(
        [ad.matmul(state.context, params[f"att_query/w{j}"]) for j in range(m)],
        axis=0)                                                    # (m, dk)
    logits = ad.scale(ad.matmul(queries, keys, transpose_b=True),
                      1.0 / math.sqrt(config.key_dim))
    weights = ad.softmax_rows(logits)                              # (m, n_free)
    return replace(state, agents=ad.matmul(weights, values))


def allocation_probs(state: EmbeddingState, params: ParamStore,
                     config: PolicyConfig, cities: tuple[int, ...]) -> AllocationMatrix:
    if state.agents is None:
        raise ProblemError("agent embeddings missing; run embed_agents first")
    keys = ad.matmul(state.city_free, params["alloc_key/w"])       # (n_free, dk')
    queries = ad.matmul(state.agents, params["alloc_query/w"])     # (m, dk')
    raw = ad.scale(ad.matmul(keys, queries, transpose_b=True),
                   1.0 / math.sqrt(config.alloc_key_dim))          # (n_free, m)
    scores = ad.scale(ad.tanh(raw), config.score_clip)
    probs = ad.softmax_rows(scores)
    am = AllocationMatrix(probs=probs, scores=scores, cities=cities)
    am.validate()
    return am


def policy_forward(instance: Instance, params: ParamStore,
                   config: PolicyConfig) -> tuple[EmbeddingState, AllocationMatrix]:
    state = embed_cities(instance, params, config)
    state = embed_agents(state, params, config)
    sel = _selectors(instance.n, instance.depot)
    return state, allocation_probs(state, params, config, sel.free)


# ---------------------------------------------------------------------------
# sampling and likelihood
# ---------------------------------------------------------------------------

def sample_allocation(am: AllocationMatrix, rng: Rng) -> tuple[Allocation, float]:
    """Draw each city's agent independently from its row; returns the
    allocation and its log-probability value."""
    am.validate()
    p = am.values
    n_free, m = p.shape
    u = rng.random(n_free)
    cum = np.cumsum(p, axis=1)
    choice = (cum > u[:, None]).argmax(axis=1)
    choice[cum[:, -1] <= u] = m - 1  # cumulative rounding below 1.0
    groups = tuple(
        tuple(am.cities[i] for i in np.flatnonzero(choice == j)) for j in range(m))
    logp = float(np.log(p[np.arange(n_free), choice]).sum())
    return Allocation(groups=groups), logp


def agents_of_cities(am: AllocationMatrix, alloc: Allocation) -> np.ndarray:
    """Map each allocation row back to its chosen agent column."""
    owner = {}
    for j, group in enumerate(alloc.groups):
        for c in group:
            owner[c] = j
    try:
        return np.array([owner[c] for c in am.cities], dtype=np.intp)
    except KeyError as e:
        raise ProblemError(f"allocation misses city {e.args[0]}") from None


def log_prob(am: AllocationMatrix, alloc: Allocation) -> Tensor:
    """Scalar log-likelihood of ``alloc`` under ``am``, on the tape."""
    if len(alloc.groups) != am.values.shape[1]:
        raise ProblemError(
            f"allocation has {len(alloc.groups)} groups for {am.values.shape[1]} agents")
    cols = agents_of_cities(am, alloc)
    rows = np.arange(len(am.cities))
    cells = am.values[rows, cols]
    if np.any(cells <= 0.0):
        bad = int(rows[cells <= 0.0][0])
        raise ProblemError(
            f"zero-probability cell: city {am.cities[bad]} -> agent {int(cols[bad])}")
    return ad.tsum(ad.log(ad.gather(am.probs, rows, cols)))
