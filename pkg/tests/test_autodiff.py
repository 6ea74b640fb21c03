import numpy as np
import pytest
import torch

from evdeblur.autodiff import central_differences, finite_diff_check, record_and_backprop, relative_errors
from evdeblur.errors import NumericalError
from evdeblur.lie import exp_torch
from helpers import toy_finite_difference_errors, toy_losses, toy_setup


def test_constant_loss_gives_zero_gradients():
    a = torch.randn(5, dtype=torch.float64)
    b = torch.randn(2, 3, dtype=torch.float64)
    loss, g = record_and_backprop(lambda: torch.tensor(3.0, dtype=torch.float64), {"a": a, "b": b})
    assert loss == 3.0
    assert torch.equal(g["a"], torch.zeros(5, dtype=torch.float64))
    assert g["b"].shape == (2, 3) and not g["b"].any()


def test_untouched_parameter_gets_zero_gradient():
    a = torch.randn(3, dtype=torch.float64)
    b = torch.randn(3, dtype=torch.float64)
    _, g = record_and_backprop(lambda: (a**2).sum(), {"a": a, "b": b})
    np.testing.assert_allclose(g["a"].numpy(), 2 * a.detach().numpy())
    assert not g["b"].any()


def test_translation_norm_under_left_increment():
    # t(delta) = R_d t0 + V v; at delta = 0 the derivative of |t|^2 w.r.t. v is 2 t0
    t0 = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    delta = torch.zeros(6, dtype=torch.float64)

    def loss():
        R, t = exp_torch(delta)
        return ((R @ t0 + t) ** 2).sum()

    _, g = record_and_backprop(loss, {"delta": delta})
    np.testing.assert_allclose(g["delta"][3:].numpy(), 2 * t0.numpy(), atol=1e-15)
    # rotational part: d|R t0|^2 / d omega = 0 (rotation preserves length)
    np.testing.assert_allclose(g["delta"][:3].numpy(), 0, atol=1e-15)


def test_nonfinite_gradient_is_reported():
    x = torch.tensor([0.0], dtype=torch.float64)
    with pytest.raises(NumericalError, match="x"):
        record_and_backprop(lambda: torch.sqrt(x).sum(), {"x": x})


def test_nonfinite_loss_is_reported():
    x = torch.tensor([-1.0], dtype=torch.float64)
    with pytest.raises(NumericalError):
        record_and_backprop(lambda: torch.log(x).sum(), {"x": x})


def test_quadratic_finite_difference_check():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    fn = lambda x: float(x @ A @ x)
    x = np.array([0.3, -0.7])
    assert finite_diff_check(fn, x, 2 * A @ x, step=1e-4) < 1e-6


def test_relative_error_floor():
    assert relative_errors([1e-9], [0.0], abs_floor=1e-7)[0] == 0.0
    assert relative_errors([1.0], [1.1])[0] == pytest.approx(0.1 / 1.1)


def test_central_differences_subset():
    g = central_differences(lambda x: float((x**3).sum()), np.array([1.0, 2.0, 3.0]), 1e-5, indices=[1])
    assert g[0] == 0 and g[2] == 0
    assert g[1] == pytest.approx(12.0, rel=1e-9)


def test_linearity_of_gradients():
    state, data, batch = toy_setup()
    flat = state.field.flat.detach().clone()
    delta = state.poses.delta.detach().clone()
    a, b = 0.7, -2.5

    def grads(fn):
        return record_and_backprop(fn, {"flat": flat, "delta": delta})[1].flat()

    g1 = grads(lambda: toy_losses(state, data, batch, flat, delta)[0])
    g2 = grads(lambda: toy_losses(state, data, batch, flat, delta)[1])
    g12 = grads(lambda: (lambda e, bl: a * e + b * bl)(*toy_losses(state, data, batch, flat, delta)))
    np.testing.assert_allclose(g12, a * g1 + b * g2, atol=1e-10, rtol=0)


def test_gradients_are_deterministic():
    state, data, batch = toy_setup()
    flat = state.field.flat.detach().clone()
    delta = state.poses.delta.detach().clone()
    fn = lambda: sum(toy_losses(state, data, batch, flat, delta))
    l1, g1 = record_and_backprop(fn, {"flat": flat, "delta": delta})
    l2, g2 = record_and_backprop(fn, {"flat": flat, "delta": delta})
    assert l1 == l2
    assert np.array_equal(g1.flat(), g2.flat())


@pytest.mark.parametrize("which,name", [(0, "event"), (1, "blur")])
def test_toy_loss_gradient_matches_finite_differences(which, name):
    rel, analytic, n_flat, _ = toy_finite_difference_errors(which)
    assert np.abs(analytic[n_flat:]).max() > 1e-4, "pose gradient unexpectedly vanishes"
    assert rel.max() < 1e-4, f"{name}: worst relative error {rel.max():.3g} at {int(rel.argmax())}"
