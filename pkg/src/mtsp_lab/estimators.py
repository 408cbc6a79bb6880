"""Gradient estimation through the non-differentiable TSP solver.

The tour length reaching the policy only through a discrete sample, the
basic estimator is the score-function (log-derivative) form
``L * d log P / d params``.  The control-variate estimator subtracts the
surrogate prediction from ``L`` inside the score term (prediction treated
as a constant there) and adds the surrogate's pathwise gradient, i.e. the
classic ``h + coeff * (c - E[c])`` construction with the surrogate
log-derivative as the variate and coefficient fixed at -1 by default.

The surrogate itself is trained to shrink a single-sample estimate of the
squared policy-gradient norm; its gradient needs one mixed second
derivative, which stays confined to the small surrogate network.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradientSample, ParamStore, Tensor
from .policy import (AllocationMatrix, PolicyConfig, log_prob, policy_forward,
                     sample_allocation)
from .problem import Allocation, Instance, Tour, minmax_objective
from .rng import Rng
from .surrogate import (SurrogateConfig, input_grad_values, reduce_matrix,
                        surrogate_predict, value_and_input_grad)
from .tsp import SolverConfig, solve_tsp


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    cv_coeff: float = -1.0
    pathwise_term: bool = True
    variance_eps: float = 1e-12


@dataclass
class CvContext:
    """Tape handles kept alive so the surrogate gradient can reuse the
    same sample."""
    probs_node: Tensor
    log_prob_node: Tensor
    pred_node: Tensor


@dataclass
class EstimatorOutput:
    grad_policy: GradientSample
    grad_surrogate: GradientSample | None
    max_len: float
    pred_len: float
    log_prob: float
    allocation: Allocation
    context: CvContext | None = field(default=None, repr=False)


def solve_allocation(alloc: Allocation, instance: Instance,
                     solver_config: SolverConfig) -> tuple[list[Tour], float, int]:
    """Solve the per-agent TSPs an allocation induces; returns tours, the
    min-max objective, and the index of the longest tour."""
    tours = [solve_tsp(group, instance, solver_config) for group in alloc.groups]
    best, arg = minmax_objective(tours, instance)
    return tours, best, arg


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def reinforce_grad(instance: Instance, policy_params: ParamStore,
                   policy_config: PolicyConfig, rng: Rng,
                   solver_config: SolverConfig) -> EstimatorOutput:
    """Plain score-function estimate from one allocation draw."""
    _, am = policy_forward(instance, policy_params, policy_config)
    alloc, lp_value = sample_allocation(am, rng)
    _, max_len, _ = solve_allocation(alloc, instance, solver_config)
    target = ad.mul(log_prob(am, alloc), ad.const(max_len))
    grad = ad.backward(target, policy_params)
    return EstimatorOutput(grad_policy=grad, grad_surrogate=None,
                           max_len=max_len, pred_len=0.0, log_prob=lp_value,
                           allocation=alloc)


def cv_policy_grad(instance: Instance, policy_params: ParamStore,
                   surrogate_params: ParamStore, policy_config: PolicyConfig,
                   surrogate_config: SurrogateConfig, est_config: EstimatorConfig,
                   rng: Rng, solver_config: SolverConfig) -> EstimatorOutput:
    """Control-variate policy gradient from one allocation draw.

    The score term carries ``max_len + coeff * detach(prediction)``; the
    pathwise surrogate gradient enters with weight ``-coeff`` (so the
    default coeff = -1 yields ``(L - L') * score + pathwise``).
    """
    _, am = policy_forward(instance, policy_params, policy_config)
    pred = surrogate_predict(am.probs, surrogate_params, surrogate_config)
    alloc, lp_value = sample_allocation(am, rng)
    _, max_len, _ = solve_allocation(alloc, instance, solver_config)

    lp = log_prob(am, alloc)
    coeff = est_config.cv_coeff
    score_scale = ad.add(ad.const(max_len), ad.scale(ad.detach(pred), coeff))
    target = ad.mul(lp, score_scale)
    if est_config.pathwise_term:
        target = ad.add(target, ad.scale(pred, -coeff))
    grad = ad.backward(target, policy_params)
    return EstimatorOutput(grad_policy=grad, grad_surrogate=None,
                           max_len=max_len, pred_len=pred.item(),
                           log_prob=lp_value, allocation=alloc,
                           context=CvContext(am.probs, lp, pred))


def surrogate_variance_grad(output: EstimatorOutput, policy_params: ParamStore,
                            surrogate_params: ParamStore,
                            surrogate_config: SurrogateConfig,
                            est_config: EstimatorConfig) -> GradientSample:
    """Gradient w.r.t. the surrogate parameters of the squared norm of the
    sample's policy gradient.

    With g the policy gradient of the sample, the derivative splits into a
    baseline part (through the prediction inside the score coefficient) and
    a mixed part (through the pathwise term), the latter computed as one
    reverse sweep over the surrogate's explicit input-gradient chain
    contracted with the tangent of the allocation matrix along g.
    """
    if output.context is None:
        raise EstimatorError("sample carries no tape; use cv_policy_grad first")
    ctx = output.context
    coeff = est_config.cv_coeff
    g = output.grad_policy.values
    score_grad = ad.backward(ctx.log_prob_node, policy_params).values

    x = reduce_matrix(ctx.probs_node.data, surrogate_config)
    pred, input_grad = value_and_input_grad(x, surrogate_params, surrogate_config)
    pred_gamma = ad.backward(pred, surrogate_params).values
    total = (2.0 * coeff * float(g @ score_grad)) * pred_gamma

    if est_config.pathwise_term:
        tangent = ad.jvp(ctx.probs_node, policy_params, output.grad_policy)
        contracted = ad.tsum(ad.mul(input_grad,
                                    ad.const(reduce_matrix(tangent, surrogate_config))))
        mixed = ad.backward(contracted, surrogate_params).values
        total = total + (-2.0 * coeff) * mixed
    return GradientSample(total, surrogate_params.layout())


def policy_grad_norm_sq(output: EstimatorOutput, policy_params: ParamStore,
                        surrogate_params: ParamStore, policy_config: PolicyConfig,
                        surrogate_config: SurrogateConfig,
                        est_config: EstimatorConfig) -> float:
    """Recompute ||policy gradient||^2 for a frozen sample at the current
    surrogate parameters (finite-difference target for the gradient above)."""
    if output.context is None:
        raise EstimatorError("sample carries no tape; use cv_policy_grad first")
    ctx = output.context
    coeff = est_config.cv_coeff
    score_grad = ad.backward(ctx.log_prob_node, policy_params).values
    pred = surrogate_predict(ctx.probs_node.data, surrogate_params, surrogate_config)
    g = (output.max_len + coeff * pred.item()) * score_grad
    if est_config.pathwise_term:
        ds_dp = input_grad_values(ctx.probs_node.data, surrogate_params, surrogate_config)
        pathwise = ad.vjp_from(ctx.probs_node, ds_dp, policy_params).values
        g = g + (-coeff) * pathwise
    return float(g @ g)


# ---------------------------------------------------------------------------
# control-variate arithmetic and the variance metric
# ---------------------------------------------------------------------------

def cv_combine(h: np.ndarray, c: np.ndarray, c_mean: np.ndarray,
               coeff: float) -> np.ndarray:
    """Elementwise h + coeff * (c - c_mean)."""
    h, c, c_mean = (np.asarray(v, dtype=np.float64) for v in (h, c, c_mean))
    if not (h.shape == c.shape == c_mean.shape):
        raise EstimatorError(
            f"shape mismatch: {h.shape}, {c.shape}, {c_mean.shape}")
    return h + coeff * (c - c_mean)


def optimal_cv_coeff(h_samples, c_samples) -> tuple[float, float]:
    """Sample estimate of the variance-minimizing coefficient
    -Cov(h, c)/Var(c), plus the sample correlation."""
    h = np.asarray(h_samples, dtype=np.float64)
    c = np.asarray(c_samples, dtype=np.float64)
    if h.shape != c.shape or h.shape[0] < 2:
        raise EstimatorError("need >= 2 paired samples of equal shape")
    if h.ndim == 1:
        h, c = h[:, None], c[:, None]
    dh = h - h.mean(axis=0)
    dc = c - c.mean(axis=0)
    n = h.shape[0] - 1
    cov = float((dh * dc).sum()) / n
    var_c = float((dc * dc).sum()) / n
    var_h = float((dh * dh).sum()) / n
    if var_c <= 0.0:
        raise EstimatorError("variate has zero variance")
    corr = cov / np.sqrt(var_h * var_c) if var_h > 0.0 else 0.0
    return -cov / var_c, float(corr)


def batch_variance_metric(samples: list[GradientSample], eps: float = 1e-12) -> float:
    """Sum over parameters of ln(unbiased sample variance + eps)."""
    if len(samples) < 2:
        raise EstimatorError("variance metric needs >= 2 gradient samples")
    stacked = np.stack([s.values for s in samples])
    var = stacked.var(axis=0, ddof=1)
    with np.errstate(divide="ignore"):
        return float(np.log(var + eps).sum())


@dataclass
class VarianceTrace:
    """Per-iteration gradient-variance metric values."""
    eps: float = 1e-12
    iterations: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def add(self, iteration: int, value: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise EstimatorError("iterations must be recorded in increasing order")
        self.iterations.append(iteration)
        self.values.append(value)


# ---------------------------------------------------------------------------
# exhaustive enumeration (oracle-grade expectations on tiny instances)
# ---------------------------------------------------------------------------

MAX_ENUMERATION = 4096


@dataclass
class AllocationTable:
    """Every allocation of a tiny instance with its probability, solver
    length, and score-gradient vector."""
    cities: tuple[int, ...]
    assignments: np.ndarray    # (K, n_free) agent per city
    probs: np.ndarray          # (K,)
    lengths: np.ndarray        # (K,)
    scores: np.ndarray         # (K, P) = d log prob / d policy params
    layout: tuple

    def expected_reinforce(self) -> np.ndarray:
        return (self.probs[:, None] * self.lengths[:, None] * self.scores).sum(axis=0)

    def expected_score(self) -> np.ndarray:
        return (self.probs[:, None] * self.scores).sum(axis=0)

    def expected_scaled_score(self, shift: float) -> np.ndarray:
        w = self.probs * (self.lengths + shift)
        return (w[:, None] * self.scores).sum(axis=0)


def assignments_to_allocation(assignment, cities, m: int) -> Allocation:
    groups = tuple(
        tuple(c for c, a in zip(cities, assignment) if a == j) for j in range(m))
    return Allocation(groups=groups)


def build_allocation_table(instance: Instance, policy_params: ParamStore,
                           policy_config: PolicyConfig,
                           solver_config: SolverConfig) -> AllocationTable:
    """Enumerate all m^n_free allocations with exact probabilities, solver
    lengths, and per-allocation score gradients.

    The score gradients come from per-cell reverse sweeps and are summed
    per allocation, independent of the sampling path they are used to
    check.
    """
    _, am = policy_forward(instance, policy_params, policy_config)
    n_free, m = am.values.shape
    if m ** n_free > MAX_ENUMERATION:
        raise EstimatorError(
            f"enumeration over {m}^{n_free} allocations refused")

    total = policy_params.total_size
    cell_grads = np.zeros((n_free, m, total))
    for i in range(n_free):
        for j in range(m):
            node = ad.tsum(ad.log(ad.gather(am.probs, np.array([i]), np.array([j]))))
            cell_grads[i, j] = ad.backward(node, policy_params).values

    assignments = np.array(list(itertools.product(range(m), repeat=n_free)),
                           dtype=np.intp)
    k = assignments.shape[0]
    probs = np.ones(k)
    lengths = np.zeros(k)
    scores = np.zeros((k, total))
    p = am.values
    rows = np.arange(n_free)
    for idx in range(k):
        a = assignments[idx]
        probs[idx] = float(np.prod(p[rows, a]))
        alloc = assignments_to_allocation(a, am.cities, m)
        _, lengths[idx], _ = solve_allocation(alloc, instance, solver_config)
        scores[idx] = cell_grads[rows, a].sum(axis=0)
    return AllocationTable(cities=am.cities, assignments=assignments,
                           probs=probs, lengths=lengths, scores=scores,
                           layout=policy_params.layout())


def reinforce_mc(table: AllocationTable, rng: Rng, n_samples: int,
                 score_sign: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo mean and standard error of the score-function estimator
    over ``n_samples`` allocation draws from the table's distribution.

    ``score_sign`` is a fault-injection hook for the gradient-check
    battery; anything but 1.0 corrupts the score term on purpose.
    """
    draws = rng.generator.choice(len(table.probs), size=n_samples, p=table.probs)
    counts = np.bincount(draws, minlength=len(table.probs)).astype(np.float64)
    g = (score_sign * table.scores) * table.lengths[:, None]   # (K, P)
    mean = counts @ g / n_samples
    second = counts @ (g * g) / n_samples
    var = (second - mean ** 2) * (n_samples / (n_samples - 1))
    se = np.sqrt(np.maximum(var, 0.0) / n_samples)
    return mean, se
