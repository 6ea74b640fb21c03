import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from evdeblur.autodiff import central_differences, record_and_backprop, relative_errors
from evdeblur.errors import NumericalError
from evdeblur.field import EncodingConfig, FieldParams, PointSample, encode, eval_field, field_forward, \
    init_field, layer_shapes, zeros_field

# recorded once from init_field(EncodingConfig(), seed=1234, dtype=float64) at the sample below
GOLDEN_SAMPLE = PointSample(np.array([0.3, -0.2, 0.5]), np.array([0.0, 0.6, -0.8]))
GOLDEN_RGB = np.array([0.3409714969983086, 0.236901284811956, 0.26873928418122706])
GOLDEN_SIGMA = 1.3438597669162167


def test_encode_examples():
    np.testing.assert_array_equal(encode(np.array([0.0]), 1), [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(encode(np.array([0.5]), 0), [1.0, 0.0], atol=1e-16)
    h = math.sqrt(2) / 2
    np.testing.assert_allclose(encode(np.array([0.25]), 1), [h, h, 1.0, 0.0], atol=1e-16)


def test_encode_length_and_component_order():
    x = np.array([0.1, 0.2, 0.3])
    e = encode(x, 2)
    assert e.shape == (3 * 2 * 3,)
    # component-major: the first 6 values belong to x[0]
    np.testing.assert_allclose(e[:6], encode(x[:1], 2))


def test_encode_torch_matches_numpy():
    x = np.random.default_rng(0).uniform(-2, 2, (5, 3))
    np.testing.assert_allclose(encode(torch.tensor(x), 3).numpy(), encode(x, 3), atol=1e-15)


def test_encoding_config_rejects_negative():
    with pytest.raises(ValueError):
        EncodingConfig(K_pos=-1)


def test_flat_length_matches_layer_shapes():
    f = init_field(EncodingConfig(3, 1), width=8, depth=2, color_width=4)
    assert f.flat.numel() == sum(i * o + o for i, o in layer_shapes(EncodingConfig(3, 1), 8, 2, 4))
    with pytest.raises(ValueError):
        FieldParams(f.shapes, f.flat[:-1], f.encoding)


def test_zero_params_give_half_gray_and_ln2():
    f = zeros_field()
    c, sigma = eval_field(f, PointSample(np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, -1.0])))
    np.testing.assert_array_equal(c, [0.5, 0.5, 0.5])
    assert sigma == pytest.approx(math.log(2.0), abs=1e-15)


def test_golden_value():
    f = init_field(EncodingConfig(), seed=1234, dtype=torch.float64)
    c, sigma = eval_field(f, GOLDEN_SAMPLE)
    np.testing.assert_allclose(c, GOLDEN_RGB, rtol=0, atol=1e-12)
    assert sigma == pytest.approx(GOLDEN_SIGMA, abs=1e-12)


def test_init_is_seeded():
    a = init_field(seed=3).flat
    b = init_field(seed=3).flat
    c = init_field(seed=4).flat
    assert torch.equal(a, b) and not torch.equal(a, c)


def _permute_hidden(f: FieldParams, layer: int, perm: np.ndarray) -> FieldParams:
    """Reorder the outputs of trunk layer ``layer`` and the matching inputs of the next layer."""
    layers = [(W.clone(), b.clone()) for W, b in f.layers()]
    W, b = layers[layer]
    layers[layer] = (W[perm], b[perm])
    Wn, bn = layers[layer + 1]
    if layer + 1 == f.n_trunk:
        # the next consumers are the density head and the color layer
        layers[layer + 1] = (Wn[:, perm], bn)
        Wc, bc = layers[layer + 2]
        cols = np.concatenate([perm, np.arange(len(perm), Wc.shape[1])])
        layers[layer + 2] = (Wc[:, cols], bc)
    else:
        layers[layer + 1] = (Wn[:, perm], bn)
    flat = torch.cat([torch.cat([W.reshape(-1), b]) for W, b in layers])
    return f.with_flat(flat)


@pytest.mark.parametrize("layer", [0, 2, 3])
def test_hidden_unit_permutation_symmetry(layer):
    f = init_field(seed=5, dtype=torch.float64)
    perm = np.random.default_rng(layer).permutation(64)
    g = _permute_hidden(f, layer, perm)
    assert not torch.equal(f.flat, g.flat)
    rng = np.random.default_rng(9)
    x = torch.tensor(rng.uniform(-1, 1, (50, 3)))
    d = torch.tensor(rng.standard_normal((50, 3)))
    d = d / d.norm(dim=-1, keepdim=True)
    c1, s1 = field_forward(f, x, d)
    c2, s2 = field_forward(g, x, d)
    assert float((c1 - c2).abs().max()) < 1e-12
    assert float((s1 - s2).abs().max()) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(0, 10**6))
def test_outputs_in_range(pos, seed):
    f = init_field(seed=seed % 97, dtype=torch.float64)
    with torch.no_grad():
        f.flat.mul_(3.0)
    c, sigma = eval_field(f, PointSample(np.array(pos), np.array([1.0, 0.0, 0.0])))
    assert np.all((c >= 0) & (c <= 1))
    assert sigma >= 0


def test_nonfinite_activation_names_layer():
    f = init_field(seed=0, dtype=torch.float64)
    with torch.no_grad():
        f.flat[0] = float("inf")
    with pytest.raises(NumericalError, match="trunk0"):
        field_forward(f, torch.ones(1, 3, dtype=torch.float64), torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64))


def test_unit_direction_required():
    with pytest.raises(ValueError):
        PointSample(np.zeros(3), np.array([1.0, 1.0, 0.0]))


def test_field_gradient_matches_finite_differences():
    enc = EncodingConfig(4, 2)
    f = init_field(enc, width=16, depth=3, color_width=8, seed=2, dtype=torch.float64)
    x = torch.tensor([[0.2, -0.4, 0.7]], dtype=torch.float64)
    d = torch.tensor([[0.0, 0.6, 0.8]], dtype=torch.float64)
    w = torch.tensor([0.3, -1.1, 0.7], dtype=torch.float64)

    def scalar(flat):
        c, s = field_forward(f, x, d, flat=flat)
        return (c[0] * w).sum() + 0.5 * s[0]

    flat = f.flat.detach().clone()
    _, g = record_and_backprop(lambda: scalar(flat), {"flat": flat})
    analytic = g["flat"].numpy()
    numeric = central_differences(lambda v: float(scalar(torch.tensor(v))), flat.detach().numpy(), 1e-4)
    big = np.abs(analytic) > 1e-6
    rel = relative_errors(analytic[big], numeric[big], abs_floor=0.0)
    assert rel.max() < 1e-4
