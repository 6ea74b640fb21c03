"""Shared fixtures-as-functions: a tiny differentiable training setup."""
from __future__ import annotations

import numpy as np
import torch

from evdeblur.autodiff import central_differences, record_and_backprop, relative_errors
from evdeblur.lie import PoseSE3, exp
from evdeblur.render import Intrinsics, camera_directions
from evdeblur.train import Batch, TrainConfig, TrainData, init_state, total_loss, render_batch

# pass/fail lines from the acceptance tests, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def toy_setup(p=3, n_samples=8, width=16, depth=2, seed=0):
    """4x4-pixel, single-view float64 setup with spread poses and random observations."""
    rng = np.random.default_rng(seed)
    K = Intrinsics(4.0, 4.0, 2.0, 2.0, 4, 4, 1.0, 4.0)
    hw = 16
    data = TrainData(K, torch.tensor(rng.uniform(0.2, 0.8, (1, hw, 3))),
                     torch.tensor(rng.integers(-2, 3, (1, hw, p - 1)), dtype=torch.float64),
                     torch.tensor(camera_directions(K)), [PoseSE3.identity()], [(0.0, 0.1)], ["toy"], 0.4)
    cfg = TrainConfig(p=p, n_samples=n_samples, batch_rays=hw, width=width, depth=depth, dtype="float64",
                      pose_jitter=0.05, seed=seed)
    state = init_state(cfg, data)
    # spread the poses so predicted events are non-trivial
    with torch.no_grad():
        state.field.flat.add_(torch.tensor(0.05 * rng.standard_normal(state.field.flat.numel())))
    batch = Batch(torch.zeros(hw, dtype=torch.long), torch.arange(hw), data.dirs_cam, data.blurry[0],
                  data.events[0], torch.tensor(rng.random((hw, n_samples))))
    return state, data, batch


def toy_losses(state, data, batch, flat, delta):
    """``(L_event, L_blur)`` as differentiable functions of the field vector and pose increments."""
    saved = state.poses.delta
    state.poses.delta = delta
    try:
        fwd = render_batch(state, data, batch, flat=flat)
    finally:
        state.poses.delta = saved
    parts = total_loss(state, fwd, batch)
    return parts.event, parts.blur


def toy_pose(seed=0):
    rng = np.random.default_rng(seed)
    return exp(np.concatenate([0.3 * rng.standard_normal(3), rng.standard_normal(3)]))


# Pose perturbations move samples through a high-frequency encoding, so a 1e-5 step
# already straddles ReLU kinks; float64 keeps a 1e-8 central difference accurate.
def toy_finite_difference_errors(which: int, step=1e-8, seed=0):
    """Relative errors of autograd vs central differences for loss ``which`` (0 event, 1 blur)."""
    state, data, batch = toy_setup(seed=seed)
    flat = state.field.flat.detach().clone()
    delta = state.poses.delta.detach().clone()
    n_flat = flat.numel()
    _, g = record_and_backprop(lambda: toy_losses(state, data, batch, flat, delta)[which],
                               {"flat": flat, "delta": delta})
    analytic = g.flat()

    def fn(x):
        with torch.no_grad():
            f = torch.tensor(x[:n_flat])
            d = torch.tensor(x[n_flat:]).reshape(delta.shape)
            return float(toy_losses(state, data, batch, f, d)[which])

    x0 = np.concatenate([flat.detach().numpy(), delta.detach().numpy().ravel()])
    numeric = central_differences(fn, x0, step)
    rel = relative_errors(analytic, numeric, abs_floor=1e-7)
    return rel, analytic, n_flat, numeric
