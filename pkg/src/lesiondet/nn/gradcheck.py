"""Central-difference gradient checking against the autodiff backward pass."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def gradcheck(
    loss_fn,
    params: dict[str, Tensor],
    coords_per_tensor: int | None = None,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and finite-difference gradients.

    loss_fn rebuilds the graph and returns a scalar Tensor. Checks every
    coordinate of every parameter unless coords_per_tensor caps the sample
    per tensor. Run at float64 for meaningful tolerances.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if coords_per_tensor is None or coords_per_tensor >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_tensor, replace=False)
        ga = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            denom = max(abs(ga[i]), abs(fd), 1e-7)
            rel = abs(ga[i] - fd) / denom
            if rel > worst:
                worst = rel
    return worst
