import numpy as np
import pytest
import torch

from interxfer import diffcore
from interxfer.diffcore import OptimState, ParamSet
from interxfer.util import NonFiniteError, ShapeMismatchError


def quadratic(params, inputs):
    x = params["x"]
    return (x * x).sum() + 3 * params["b"].sum()


def test_param_set_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        ParamSet({"w": [1.0, float("nan")]})


def test_congruence():
    a = ParamSet({"w": np.zeros((2, 3)), "b": np.zeros(3)})
    b = ParamSet({"w": np.ones((2, 3)), "b": np.ones(3)})
    c = ParamSet({"w": np.ones((3, 2)), "b": np.ones(3)})
    assert a.congruent(b)
    assert not a.congruent(c)
    with pytest.raises(ShapeMismatchError):
        a.require_congruent(c)


def test_gradient_of_quadratic():
    params = ParamSet({"x": [1.0, -2.0], "b": [0.5]})
    result = diffcore.eval_and_grad(quadratic, params)
    assert result.value == pytest.approx(1 + 4 + 1.5)
    assert np.allclose(result.grads["x"].numpy(), [2.0, -4.0])
    assert np.allclose(result.grads["b"].numpy(), [3.0])


def test_unused_parameter_gets_zero_gradient():
    params = ParamSet({"x": [1.0], "b": [0.0], "unused": np.ones((2, 2))})
    grads = diffcore.eval_and_grad(quadratic, params).grads
    assert torch.equal(grads["unused"], torch.zeros((2, 2), dtype=diffcore.DTYPE))


def test_non_scalar_program_is_rejected():
    params = ParamSet({"x": [1.0, 2.0]})
    with pytest.raises(ShapeMismatchError):
        diffcore.eval_and_grad(lambda p, _: p["x"] * 2, params)


def test_non_finite_output_names_node():
    params = ParamSet({"x": [0.0]})
    with pytest.raises(NonFiniteError) as info:
        diffcore.eval_and_grad(lambda p, _: diffcore.checked("log", torch.log(p["x"])).sum(), params)
    assert info.value.node == "log"


def test_finite_difference_agrees_on_smooth_program():
    params = ParamSet({"w": np.array([[0.3, -0.7], [1.1, 0.2]]), "v": [0.4, -0.9]})

    def program(p, inputs):
        hidden = torch.tanh(p["w"] @ inputs)
        return (torch.sin(hidden) * p["v"]).sum() + (p["v"] ** 2).sum()

    inputs = torch.tensor([0.5, -1.5], dtype=diffcore.DTYPE)
    assert diffcore.finite_diff_check(program, params, 1e-6, inputs) < 1e-6


def gradient_norm(params, inputs):
    x = inputs.clone().requires_grad_(True)
    field = torch.tanh(x @ params["w"]).sum()
    (slope,) = torch.autograd.grad(field, x, create_graph=True)
    return (slope * slope).sum()


def test_programs_may_differentiate_their_inputs():
    params = ParamSet({"w": np.array([0.5, -1.2, 0.8])})
    points = torch.tensor([[0.1, 0.2, -0.3], [0.4, -0.5, 0.6]], dtype=diffcore.DTYPE)
    value = diffcore.evaluate(gradient_norm, params, points)
    assert value == pytest.approx(diffcore.eval_and_grad(gradient_norm, params, points).value)
    assert diffcore.finite_diff_check(gradient_norm, params, 1e-6, points) < 1e-6


def test_adam_first_step_moves_by_learning_rate():
    params = ParamSet({"x": [1.0, -1.0]})
    grads = ParamSet({"x": [0.2, -5.0]})
    state = OptimState.fresh(params, 0.1)
    updated, state = diffcore.adam_step(params, grads, state, 0.1)
    # Bias correction makes the first step lr * sign(g).
    assert np.allclose(updated["x"].numpy(), [0.9, -0.9], atol=1e-6)
    assert state.step == 1


def test_adam_rejects_mismatched_gradients():
    params = ParamSet({"x": [1.0]})
    with pytest.raises(ShapeMismatchError):
        diffcore.adam_step(params, ParamSet({"y": [1.0]}), OptimState.fresh(params, 0.1), 0.1)


def test_clipped_step():
    params = ParamSet({"x": [0.0, 0.0]})
    grads = ParamSet({"x": [3.0, 4.0]})
    updated = diffcore.sgd_step_clipped(params, grads, lr=1.0, max_norm=0.5)
    assert np.allclose(updated["x"].numpy(), [-0.3, -0.4])
    small = ParamSet({"x": [0.03, 0.04]})
    assert np.allclose(diffcore.clip_grads(small, 1.0)["x"].numpy(), [0.03, 0.04])


def test_halving_schedule():
    assert diffcore.halving_schedule(0.01, 0, 10) == 0.01
    assert diffcore.halving_schedule(0.01, 9, 10) == 0.01
    assert diffcore.halving_schedule(0.01, 10, 10) == 0.005
    assert diffcore.halving_schedule(0.01, 25, 10) == pytest.approx(0.0025)
