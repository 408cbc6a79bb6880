"""The surrogate network: a small dense net predicting the min-max tour
length from the allocation matrix.

Its value is used as a learned baseline and its pathwise gradient as the
smooth part of the control-variate estimator, so both the prediction and
its derivative w.r.t. the input matrix must be differentiable in the
surrogate parameters.  ``value_and_input_grad`` therefore spells out the
input-gradient chain with ordinary tape ops, making the mixed second
derivative available through one more reverse sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .rng import Rng


class SurrogateError(ValueError):
    pass


@dataclass(frozen=True)
class SurrogateConfig:
    hidden_dim: int = 256
    layers: int = 3
    activation: str = "tanh"
    input_reduction: str = "flatten"   # or "agent_mean"

    def __post_init__(self):
        if self.layers < 1:
            raise SurrogateError("need at least one layer")
        if self.hidden_dim < 1:
            raise SurrogateError("hidden_dim must be >= 1")
        if self.activation != "tanh":
            raise SurrogateError(f"unsupported activation {self.activation!r}")
        if self.input_reduction not in ("flatten", "agent_mean"):
            raise SurrogateError(f"unknown input reduction {self.input_reduction!r}")


def input_dim(config: SurrogateConfig, n_free: int, m: int) -> int:
    return m if config.input_reduction == "agent_mean" else n_free * m


def init_surrogate_params(config: SurrogateConfig, n_free: int, m: int,
                          rng: Rng) -> ParamStore:
    dims = [input_dim(config, n_free, m)]
    dims += [config.hidden_dim] * (config.layers - 1)
    dims += [1]
    store = ParamStore("surrogate")
    for k in range(config.layers):
        bound = 1.0 / np.sqrt(dims[k])
        store.add(f"fc{k + 1}/w", rng.derive(k).uniform(-bound, bound, (dims[k], dims[k + 1])))
        store.add(f"fc{k + 1}/b", np.zeros(dims[k + 1]))
    return store


def _expect_input(params: ParamStore, config: SurrogateConfig, n_free: int, m: int) -> None:
    want = input_dim(config, n_free, m)
    have = params["fc1/w"].shape[0]
    if have != want:
        raise SurrogateError(
            f"surrogate sized for input {have}, instance needs {want} "
            f"(n_free={n_free}, m={m})")


def _reduce_input(probs: Tensor, config: SurrogateConfig) -> Tensor:
    n_free, m = probs.shape
    if config.input_reduction == "agent_mean":
        pooled = ad.matmul(ad.const(np.full((1, n_free), 1.0 / n_free)), probs)
        return ad.gather(pooled, np.zeros(m, dtype=np.intp), np.arange(m))
    rows = np.repeat(np.arange(n_free), m)
    cols = np.tile(np.arange(m), n_free)
    return ad.gather(probs, rows, cols)  # row-major flattening


def reduce_matrix(values: np.ndarray, config: SurrogateConfig) -> np.ndarray:
    """The same input reduction applied to a plain array."""
    if config.input_reduction == "agent_mean":
        return values.mean(axis=0)
    return values.ravel()


def surrogate_predict(probs: Tensor | np.ndarray, params: ParamStore,
                      config: SurrogateConfig) -> Tensor:
    """Scalar length prediction; differentiable in the input matrix and the
    parameters when ``probs`` is a live tape node."""
    if not isinstance(probs, Tensor):
        probs = ad.const(np.asarray(probs, dtype=np.float64))
    n_free, m = probs.shape
    _expect_input(params, config, n_free, m)
    h = _reduce_input(probs, config)
    for k in range(1, config.layers + 1):
        h = ad.add(ad.matmul(h, params[f"fc{k}/w"]), params[f"fc{k}/b"])
        if k < config.layers:
            h = ad.tanh(h)
    return ad.tsum(h)


def value_and_input_grad(x_const: np.ndarray, params: ParamStore,
                         config: SurrogateConfig) -> tuple[Tensor, Tensor]:
    """Prediction and its gradient w.r.t. the (reduced) input vector, both
    as tape nodes over the surrogate parameters.

    The gradient chain is written out explicitly (tanh' = 1 - a^2 backprop)
    so a reverse sweep over the returned nodes yields parameter derivatives
    of the input gradient itself.
    """
    x = ad.const(np.asarray(x_const, dtype=np.float64).ravel())
    if x.shape != (params["fc1/w"].shape[0],):
        raise SurrogateError(
            f"input vector {x.shape} does not match surrogate input "
            f"({params['fc1/w'].shape[0]},)")
    acts: list[Tensor] = []
    h = x
    for k in range(1, config.layers + 1):
        h = ad.add(ad.matmul(h, params[f"fc{k}/w"]), params[f"fc{k}/b"])
        if k < config.layers:
            h = ad.tanh(h)
            acts.append(h)
    pred = ad.tsum(h)

    # reverse chain: d pred / d activation, layer by layer
    g = ad.matmul(params[f"fc{config.layers}/w"], ad.const(np.ones(1)))
    for k in range(config.layers - 1, 0, -1):
        a = acts[k - 1]
        gz = ad.mul(g, ad.sub(ad.const(np.ones(a.shape)), ad.mul(a, a)))
        g = ad.matmul(params[f"fc{k}/w"], gz)
    return pred, g


def input_grad_values(probs_values: np.ndarray, params: ParamStore,
                      config: SurrogateConfig) -> np.ndarray:
    """d prediction / d allocation-matrix as a plain (n_free, m) array."""
    n_free, m = probs_values.shape
    _expect_input(params, config, n_free, m)
    x = reduce_matrix(probs_values, config)
    _, g = value_and_input_grad(x, params, config)
    if config.input_reduction == "agent_mean":
        return np.tile(g.data / n_free, (n_free, 1))
    return g.data.reshape(n_free, m)
