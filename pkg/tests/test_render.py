import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from evdeblur.autodiff import central_differences, record_and_backprop, relative_errors
from evdeblur.field import EncodingConfig, init_field, zeros_field
from evdeblur.lie import PoseSE3, exp, exp_torch
from evdeblur.render import LOG_EPS, Intrinsics, camera_directions, compositing_weights, pixel_ray, \
    render_image, render_pixel, render_rays, stratified_samples, to_gray, to_log, volume_render

K = Intrinsics(50.0, 50.0, 16.0, 12.0, 32, 24, 1.0, 5.0)
# principal point on a pixel center: pixel (15, 11) looks straight down the axis
K_CENTERED = Intrinsics(50.0, 50.0, 15.5, 11.5, 32, 24, 1.0, 5.0)


def test_principal_axis_ray():
    ray = pixel_ray(K_CENTERED, PoseSE3.identity(), (15, 11))
    np.testing.assert_allclose(ray.direction, [0, 0, -1], atol=1e-15)
    np.testing.assert_array_equal(ray.origin, [0, 0, 0])


def test_pure_translation_shifts_origin_only():
    P = PoseSE3(np.eye(3), np.array([1.0, -2.0, 3.0]))
    for px in [(0, 0), (7, 20), (31, 23)]:
        a, b = pixel_ray(K, PoseSE3.identity(), px), pixel_ray(K, P, px)
        np.testing.assert_array_equal(a.direction, b.direction)
        np.testing.assert_array_equal(b.origin, [1.0, -2.0, 3.0])


def test_yaw_rotates_direction():
    # 90 degrees about +y: R = [[0,0,1],[0,1,0],[-1,0,0]] sends -z to -x
    R = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    P = exp([0, np.pi / 2, 0, 0, 0, 0])
    np.testing.assert_allclose(P.rotation, R, atol=1e-15)
    np.testing.assert_allclose(pixel_ray(K_CENTERED, P, (15, 11)).direction, [-1, 0, 0], atol=1e-15)
    d0 = pixel_ray(K, PoseSE3.identity(), (3, 5)).direction
    np.testing.assert_allclose(pixel_ray(K, P, (3, 5)).direction, R @ d0, atol=1e-15)


def test_image_y_axis_points_down():
    top = pixel_ray(K, PoseSE3.identity(), (15, 0)).direction
    right = pixel_ray(K, PoseSE3.identity(), (31, 11)).direction
    assert top[1] > 0 and right[0] > 0


def test_pixel_out_of_bounds():
    with pytest.raises(ValueError):
        pixel_ray(K, PoseSE3.identity(), (32, 0))


def test_unit_directions():
    d = camera_directions(K)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


class _Half:
    def random(self, n):
        return np.full(n, 0.5)


def test_single_sample_at_midpoint():
    np.testing.assert_allclose(stratified_samples(1.0, 1, _Half(), far=5.0), [3.0])
    np.testing.assert_allclose(stratified_samples(K, 1), [3.0])


def test_stratified_samples_stay_in_bins():
    rng = np.random.default_rng(0)
    N = 64
    delta = (K.far - K.near) / N
    lo = K.near + np.arange(N) * delta
    for _ in range(10_000):
        s = stratified_samples(K, N, rng)
        assert np.all(s >= lo) and np.all(s <= lo + delta)
        assert np.all(np.diff(s) > 0)


def test_transparent_ray_is_black():
    c = volume_render(np.ones((4, 3)), np.zeros(4), np.array([1.0, 2.0, 3.0, 4.0]), 5.0)
    np.testing.assert_array_equal(c, [0, 0, 0])


def test_opaque_limit():
    c = volume_render(np.array([[0.2, 0.4, 0.9]]), np.array([50.0]), np.array([4.0]), 5.0)
    np.testing.assert_allclose(c, [0.2, 0.4, 0.9], atol=1e-6)


def test_two_sample_hand_evaluation():
    e = math.exp(-1.0)
    c = volume_render(np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([1.0, 1.0]), np.array([1.0, 2.0]), 3.0)
    np.testing.assert_allclose(c, [1 - e, e * (1 - e), 0.0], atol=1e-15)


def test_negative_density_rejected():
    with pytest.raises(ValueError):
        volume_render(np.ones((2, 3)), np.array([1.0, -0.1]), np.array([1.0, 2.0]), 3.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=20), st.integers(0, 2**31))
def test_weight_sum_in_unit_interval(sigmas, seed):
    rng = np.random.default_rng(seed)
    n = len(sigmas)
    depths = np.sort(rng.uniform(1, 5, n))
    w = compositing_weights(torch.tensor(sigmas, dtype=torch.float64), torch.tensor(depths), 5.0)
    assert float(w.min()) >= 0
    assert float(w.sum()) <= 1 + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=12), st.floats(0, 5), st.integers(0, 11))
def test_opacity_monotone(sigmas, bump, i):
    i = i % len(sigmas)
    depths = torch.linspace(1, 4, len(sigmas), dtype=torch.float64)
    s = torch.tensor(sigmas, dtype=torch.float64)
    s2 = s.clone()
    s2[i] += bump

    def trans(x):
        tau = x * torch.cat([depths[1:], torch.tensor([5.0], dtype=torch.float64)]) - x * depths
        return torch.exp(-(torch.cumsum(tau, 0) - tau))

    assert torch.all(trans(s2)[i + 1:] <= trans(s)[i + 1:] + 1e-15)


def test_render_pixel_zero_field_closed_form():
    # zero params: sigma = ln 2 everywhere, color 0.5; weight sum = 1 - exp(-ln2 (far - first depth))
    f = zeros_field()
    depths = stratified_samples(K, 16)
    expected = 0.5 * (1 - math.exp(-math.log(2) * (K.far - depths[0])))
    np.testing.assert_allclose(render_pixel(f, K, PoseSE3.identity(), (4, 4), 16), expected, atol=1e-14)


def test_render_pixel_opaque_constant_field():
    def opaque(x, d):
        return torch.full(x.shape, 0.3, dtype=x.dtype), torch.full(x.shape[:-1], 1e4, dtype=x.dtype)

    np.testing.assert_allclose(render_pixel(opaque, K, PoseSE3.identity(), (0, 0), 8), 0.3, atol=1e-12)


def test_render_image_matches_render_pixel():
    f = init_field(EncodingConfig(3, 1), width=16, depth=2, seed=0, dtype=torch.float64)
    P = exp([0.1, -0.2, 0.05, 0.3, 0.1, 0.2])
    img = render_image(f, K, P, 12)
    for px in [(0, 0), (5, 17), (31, 23)]:
        np.testing.assert_allclose(img[px[1], px[0]], render_pixel(f, K, P, px, 12), atol=1e-14)


def test_gray_and_log():
    assert to_gray(np.array([0.2, 0.4, 0.6])) == pytest.approx(0.4)
    assert to_log(to_gray(np.ones(3))) == pytest.approx(math.log(1 + LOG_EPS))
    assert to_log(to_gray(np.zeros(3))) == pytest.approx(math.log(LOG_EPS))


def test_render_gradient_wrt_params_and_pose():
    f = init_field(EncodingConfig(3, 1), width=16, depth=2, seed=1, dtype=torch.float64)
    with torch.no_grad():
        f.flat.add_(0.05 * torch.randn(f.flat.numel(), generator=torch.Generator().manual_seed(0),
                                       dtype=torch.float64))
    base = exp([0.05, 0.1, -0.02, 0.1, -0.1, 0.3])
    d_cam = torch.tensor(camera_directions(K, np.array([[10, 7], [20, 3]])))
    depths = torch.tensor(stratified_samples(K, 8, np.random.default_rng(2)))  # frozen
    w = torch.tensor([0.2, -0.7, 1.3], dtype=torch.float64)
    Rb = torch.tensor(base.rotation)
    tb = torch.tensor(base.translation)

    def scalar(flat, delta):
        dR, dt = exp_torch(delta)
        R, t = dR @ Rb, dR @ tb + dt
        rgb = render_rays(f, t.expand(2, 3), d_cam @ R.T, depths, K.far, flat=flat)
        return (rgb * w).sum()

    flat = f.flat.detach().clone()
    delta = torch.zeros(6, dtype=torch.float64)
    _, g = record_and_backprop(lambda: scalar(flat, delta), {"flat": flat, "delta": delta})
    n = flat.numel()
    fn = lambda x: float(scalar(torch.tensor(x[:n]), torch.tensor(x[n:])))
    x0 = np.concatenate([flat.detach().numpy(), np.zeros(6)])
    numeric = central_differences(fn, x0, 1e-7)
    assert relative_errors(g.flat(), numeric, abs_floor=1e-7).max() < 1e-4
