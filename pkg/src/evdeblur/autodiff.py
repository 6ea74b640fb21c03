"""Reverse-mode gradients of scalar losses and a finite-difference checker.

Recording and backpropagation are delegated to torch autograd: a forward pass
built from torch primitives records the graph, ``backward`` replays it in
reverse. This module pins the contract the rest of the package relies on,
namely which tensors get gradients, zero gradients for untouched inputs and
hard failure on non-finite values, and supplies the independent
central-difference oracle used to validate those gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NumericalError


@dataclass
class GradHandle:
    """Gradients keyed by parameter name, each shaped like its parameter."""

    grads: dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.grads[name]

    def flat(self) -> np.ndarray:
        return np.concatenate([g.detach().double().reshape(-1).numpy() for g in self.grads.values()])


def record_and_backprop(loss_fn: Callable[[], torch.Tensor],
                        params: dict[str, torch.Tensor]) -> tuple[float, GradHandle]:
    """Evaluate ``loss_fn`` and return ``(loss, gradients w.r.t. params)``.

    Parameters the loss does not depend on get zero gradients. Raises
    :class:`NumericalError` naming the parameter if a gradient is non-finite.
    """
    leaves = {}
    for name, p in params.items():
        if not p.requires_grad:
            p.requires_grad_(True)
        p.grad = None
        leaves[name] = p
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericalError(f"loss is not finite ({float(loss.detach())})")
    tensors = list(leaves.values())
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)
    out = {}
    for (name, p), g in zip(leaves.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for '{name}'")
        out[name] = g
    return float(loss.detach()), GradHandle(out)


def central_differences(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4,
                        indices: Sequence[int] | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    idx = range(x.size) if indices is None else indices
    g = np.zeros(x.size)
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g[i] = (fn(xp) - fn(xm)) / (2 * step)
    return g


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-7) -> np.ndarray:
    """``|a - n| / max(|a|, |n|)``, zero wherever the mismatch is below ``abs_floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(diff <= abs_floor, 0.0, diff / scale)
    return rel


def finite_diff_check(fn: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
                      step: float = 1e-4, abs_floor: float = 1e-7,
                      indices: Sequence[int] | None = None) -> float:
    """Worst relative error between ``analytic`` and central differences of ``fn``."""
    numeric = central_differences(fn, x, step, indices)
    if indices is not None:
        idx = np.asarray(list(indices))
        return float(relative_errors(np.asarray(analytic).ravel()[idx], numeric[idx], abs_floor).max())
    return float(relative_errors(analytic, numeric, abs_floor).max())
