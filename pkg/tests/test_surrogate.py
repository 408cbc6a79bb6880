import numpy as np
import pytest

from mtsp_lab import autodiff as ad
from mtsp_lab.autodiff import ParamStore, backward, finite_diff_check, vjp_from
from mtsp_lab.policy import policy_forward
from mtsp_lab.problem import generate_instance
from mtsp_lab.rng import Rng
from mtsp_lab.surrogate import (SurrogateConfig, SurrogateError,
                                init_surrogate_params, input_grad_values,
                                reduce_matrix, surrogate_predict,
                                value_and_input_grad)
from tests.conftest import TINY_POLICY, TINY_SURROGATE


def random_probs(n_free, m, seed=0):
    raw = Rng(seed).random((n_free, m))
    return raw / raw.sum(axis=1, keepdims=True)


def test_zero_params_zero_output(tiny_surrogate_params):
    for t in tiny_surrogate_params.tensors():
        np.copyto(t.data, 0.0)
    pred = surrogate_predict(random_probs(2, 2), tiny_surrogate_params, TINY_SURROGATE)
    assert pred.item() == 0.0


def test_prediction_deterministic(tiny_surrogate_params):
    p = random_probs(2, 2, seed=3)
    a = surrogate_predict(p, tiny_surrogate_params, TINY_SURROGATE).item()
    b = surrogate_predict(p, tiny_surrogate_params, TINY_SURROGATE).item()
    assert a == b


def test_gradient_wrt_params_matches_fd(tiny_surrogate_params):
    p = random_probs(2, 2, seed=4)
    report = finite_diff_check(
        lambda params: surrogate_predict(p, params, TINY_SURROGATE),
        tiny_surrogate_params, eps=1e-5, tol=1e-4)
    assert report.passed, str(report)


def test_gradient_wrt_input_matches_fd(tiny_surrogate_params):
    store = ParamStore("policy")
    store.add("p", random_probs(2, 2, seed=5))

    def program(params):
        return surrogate_predict(params["p"], tiny_surrogate_params, TINY_SURROGATE)

    report = finite_diff_check(program, store, eps=1e-5, tol=1e-4)
    assert report.passed, str(report)


def test_input_grad_values_match_autodiff(tiny_surrogate_params):
    store = ParamStore("policy")
    p = store.add("p", random_probs(2, 2, seed=6))
    pred = surrogate_predict(p, tiny_surrogate_params, TINY_SURROGATE)
    via_tape = backward(pred, store).by_name("p")
    explicit = input_grad_values(p.data, tiny_surrogate_params, TINY_SURROGATE)
    assert explicit == pytest.approx(via_tape, abs=1e-12)


def test_value_and_input_grad_consistent(tiny_surrogate_params):
    p = random_probs(2, 2, seed=7)
    x = reduce_matrix(p, TINY_SURROGATE)
    pred, grad = value_and_input_grad(x, tiny_surrogate_params, TINY_SURROGATE)
    assert pred.item() == pytest.approx(
        surrogate_predict(p, tiny_surrogate_params, TINY_SURROGATE).item(), abs=1e-12)
    assert grad.data == pytest.approx(
        input_grad_values(p, tiny_surrogate_params, TINY_SURROGATE).ravel(), abs=1e-12)


def test_pathwise_chain_matches_end_to_end(tiny_policy_params, tiny_surrogate_params):
    # d surrogate / d policy params through the allocation matrix: seeding
    # the policy tape with the explicit input gradient must equal the
    # single-tape gradient
    inst = generate_instance(3, 2, seed=8)
    _, am = policy_forward(inst, tiny_policy_params, TINY_POLICY)
    pred = surrogate_predict(am.probs, tiny_surrogate_params, TINY_SURROGATE)
    end_to_end = backward(pred, tiny_policy_params).values
    seed = input_grad_values(am.values, tiny_surrogate_params, TINY_SURROGATE)
    two_stage = vjp_from(am.probs, seed, tiny_policy_params).values
    assert end_to_end == pytest.approx(two_stage, abs=1e-10)


def test_agent_mean_reduction():
    cfg = SurrogateConfig(hidden_dim=6, layers=2, input_reduction="agent_mean")
    params = init_surrogate_params(cfg, n_free=5, m=3, rng=Rng(1))
    assert params["fc1/w"].shape == (3, 6)
    p = random_probs(5, 3, seed=9)
    pred = surrogate_predict(p, params, cfg)
    assert np.isfinite(pred.item())
    grad = input_grad_values(p, params, cfg)
    assert grad.shape == (5, 3)
    # pooled input means every city row shares the same gradient
    assert np.ptp(grad, axis=0) == pytest.approx(np.zeros(3), abs=1e-15)


def test_size_mismatch_refused(tiny_surrogate_params):
    with pytest.raises(SurrogateError, match="sized for"):
        surrogate_predict(random_probs(4, 2), tiny_surrogate_params, TINY_SURROGATE)


def test_single_layer_net():
    cfg = SurrogateConfig(hidden_dim=4, layers=1)
    params = init_surrogate_params(cfg, n_free=2, m=2, rng=Rng(2))
    p = random_probs(2, 2, seed=10)
    w = params["fc1/w"].data[:, 0]
    b = params["fc1/b"].data[0]
    assert surrogate_predict(p, params, cfg).item() == pytest.approx(p.ravel() @ w + b)


def test_config_validation():
    with pytest.raises(SurrogateError):
        SurrogateConfig(layers=0)
    with pytest.raises(SurrogateError):
        SurrogateConfig(input_reduction="max_pool")
