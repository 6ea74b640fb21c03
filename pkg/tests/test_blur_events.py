import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from evdeblur.blur_events import EventRecord, EventStream, RenderedStack, bin_events, predict_events, \
    synthesize_blur


def test_single_image_blur_is_identity():
    img = np.random.default_rng(0).random((1, 4, 5, 3))
    np.testing.assert_array_equal(synthesize_blur(img), img[0])


def test_identical_images_blur_to_themselves():
    img = np.random.default_rng(1).random((4, 5, 3))
    np.testing.assert_array_equal(synthesize_blur(np.stack([img] * 4)), img)


def test_two_pixel_average():
    stack = RenderedStack(np.array([[[0.2, 0.2, 0.2]], [[0.6, 0.6, 0.6]]]), np.array([0.0, 1.0]))
    np.testing.assert_allclose(synthesize_blur(stack), [[0.4, 0.4, 0.4]], atol=1e-16)


def test_mismatched_resolution_rejected():
    with pytest.raises(ValueError):
        synthesize_blur([np.zeros((2, 3, 3)), np.zeros((3, 2, 3))])
    with pytest.raises(ValueError):
        RenderedStack(np.zeros((2, 3, 3)), np.array([0.0]))


def test_constant_log_gives_no_events():
    L = np.full((3, 4, 4), -0.7)
    np.testing.assert_array_equal(predict_events(L, 0.3), np.zeros((2, 4, 4)))


def test_event_count_is_difference_over_threshold():
    L = np.array([[0.0], [0.9]])
    np.testing.assert_allclose(predict_events(L, 0.3), [[3.0]], rtol=1e-15)


def test_quantized_variant_truncates_toward_zero():
    L = np.array([[0.0, 0.0], [0.7, -0.7]])
    np.testing.assert_array_equal(predict_events(L, 0.3, quantize=True), [[2.0, -2.0]])


def test_predict_events_from_stack_uses_log_gray():
    colors = np.random.default_rng(2).random((3, 2, 2, 3))
    stack = RenderedStack(colors, np.array([0.0, 0.5, 1.0]))
    L = np.log(colors.mean(-1) + 1e-3)
    np.testing.assert_allclose(predict_events(stack, 0.3), (L[1:] - L[:-1]) / 0.3, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**31), st.floats(0.05, 1.0))
def test_telescoping(p, seed, theta):
    L = np.random.default_rng(seed).normal(size=(p, 6))
    E = predict_events(L, theta)
    np.testing.assert_allclose(E.sum(0), (L[-1] - L[0]) / theta, rtol=0, atol=1e-12)


def test_telescoping_torch():
    L = torch.randn(5, 7, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    E = predict_events(L, 0.3)
    assert float((E.sum(0) - (L[-1] - L[0]) / 0.3).abs().max()) < 1e-14


def test_empty_stream_gives_zero_grid():
    g = bin_events(EventStream.empty(), [0.0, 0.5, 1.0], 3, 2)
    assert g.counts.shape == (2, 2, 3) and not g.counts.any()


def test_signed_sum_in_one_bin():
    recs = [EventRecord(1, 0, 0.1 + 0.01 * k, 1) for k in range(3)] + [EventRecord(1, 0, 0.2, -1)]
    g = bin_events(EventStream.from_records(recs), [0.0, 0.5, 1.0], 3, 2)
    assert g.counts[0, 0, 1] == 2
    assert g.counts.sum() == 2


def test_boundary_event_goes_to_later_bin():
    g = bin_events(EventStream.from_records([EventRecord(0, 0, 0.5, 1)]), [0.0, 0.5, 1.0], 1, 1)
    np.testing.assert_array_equal(g.counts[:, 0, 0], [0, 1])


def test_final_timestamp_is_inside_last_bin_and_outside_events_dropped():
    s = EventStream.from_records([EventRecord(0, 0, 1.0, 1), EventRecord(0, 0, 1.5, 1),
                                  EventRecord(0, 0, -0.1, -1)])
    g = bin_events(s, [0.0, 0.5, 1.0], 1, 1)
    np.testing.assert_array_equal(g.counts[:, 0, 0], [0, 1])
    assert g.dropped == 2


def test_unsorted_stream_is_accepted():
    s = EventStream.from_records([EventRecord(0, 0, 0.9, 1), EventRecord(0, 0, 0.1, -1)])
    np.testing.assert_array_equal(bin_events(s, [0.0, 0.5, 1.0], 1, 1).counts[:, 0, 0], [-1, 1])


def test_out_of_bounds_pixel_rejected():
    with pytest.raises(ValueError):
        bin_events(EventStream.from_records([EventRecord(3, 0, 0.1, 1)]), [0.0, 1.0], 3, 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 200), st.integers(2, 7))
def test_reversed_polarity_cancels(seed, n, p):
    rng = np.random.default_rng(seed)
    s = EventStream(rng.uniform(0, 1, n), rng.integers(0, 5, n), rng.integers(0, 4, n),
                    rng.choice([-1, 1], n))
    ts = np.linspace(0, 1, p)
    a, b = bin_events(s, ts, 5, 4), bin_events(s.flipped(), ts, 5, 4)
    assert not (a.counts + b.counts).any()
