"""Shared test helpers: finite-difference oracle and parameter manipulation."""

from __future__ import annotations

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(12345)
    yield


def zero_all_parameters(module: torch.nn.Module) -> torch.nn.Module:
    with torch.no_grad():
        for param in module.parameters():
            param.zero_()
    return module


def finite_difference_gradients(
    fn,
    tensors: list[torch.Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
):
    """Central finite differences of a scalar ``fn()`` w.r.t. each tensor.

    Returns per-tensor arrays shaped like the inputs, holding NaN at
    coordinates that were not probed when ``max_coords`` subsamples.
    ``fn`` must read the tensors in place; run everything in float64.
    """
    rng = np.random.default_rng(seed)
    grads = []
    for tensor in tensors:
        flat = tensor.detach().reshape(-1)
        n = flat.numel()
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        grad = np.full(n, np.nan)
        for idx in coords:
            original = float(flat[idx])
            with torch.no_grad():
                flat[idx] = original + eps
            up = float(fn().detach())
            with torch.no_grad():
                flat[idx] = original - eps
            down = float(fn().detach())
            with torch.no_grad():
                flat[idx] = original
            grad[idx] = (up - down) / (2 * eps)
        grads.append(grad.reshape(tuple(tensor.shape)))
    return grads


def check_gradients(
    fn,
    tensors: list[torch.Tensor],
    rtol: float = 1e-4,
    eps: float = 1e-5,
    max_coords: int | None = 40,
    seed: int = 0,
) -> float:
    """Compare autograd gradients of ``fn`` against central differences.

    Returns the worst relative error over all probed coordinates and
    asserts it is below ``rtol``.
    """
    for tensor in tensors:
        assert tensor.dtype == torch.float64, "gradient checks must run in float64"
        tensor.grad = None
    loss = fn()
    loss.backward()
    analytic = [t.grad.detach().cpu().numpy().copy() if t.grad is not None else np.zeros(tuple(t.shape)) for t in tensors]
    numeric = finite_difference_gradients(fn, tensors, eps=eps, max_coords=max_coords, seed=seed)
    worst = 0.0
    for ana, num in zip(analytic, numeric):
        mask = ~np.isnan(num)
        if not mask.any():
            continue
        diff = np.abs(ana[mask] - num[mask])
        scale = np.maximum(np.maximum(np.abs(ana[mask]), np.abs(num[mask])), 1.0)
        worst = max(worst, float((diff / scale).max()))
    assert worst < rtol, f"worst relative gradient error {worst:.3e} >= {rtol}"
    return worst
