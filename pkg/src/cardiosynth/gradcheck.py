"""Finite-difference verification of autograd gradients."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn


def finite_difference_check(model: nn.Module, loss_fn, n_coords: int = 40,
                            h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``loss_fn()`` must evaluate the scalar loss from the model's current
    parameters. The model should already be in double precision and eval
    mode; ``n_coords`` parameter coordinates are sampled across all tensors.
    Coordinates whose gradient magnitude is below 1e-7 are skipped (the
    relative error there is dominated by round-off).
    """
    for p in model.parameters():
        p.requires_grad_(True)
    loss = loss_fn()
    model.zero_grad()
    loss.backward()

    rng = np.random.default_rng(seed)
    params = [p for p in model.parameters() if p.grad is not None]
    sizes = np.array([p.numel() for p in params])
    bounds = np.cumsum(sizes)
    total = int(bounds[-1])
    worst = 0.0
    with torch.no_grad():
        for flat_idx in rng.choice(total, size=min(n_coords, total), replace=False):
            pi = int(np.searchsorted(bounds, flat_idx, side="right"))
            local = int(flat_idx - (bounds[pi] - sizes[pi]))
            p = params[pi]
            orig = p.view(-1)[local].item()
            g_auto = p.grad.view(-1)[local].item()

            p.view(-1)[local] = orig + h
            f_plus = float(loss_fn())
            p.view(-1)[local] = orig - h
            f_minus = float(loss_fn())
            p.view(-1)[local] = orig
            g_fd = (f_plus - f_minus) / (2 * h)

            scale = max(abs(g_auto), abs(g_fd))
            if scale < 1e-7:
                continue
            worst = max(worst, abs(g_auto - g_fd) / scale)
    return worst
