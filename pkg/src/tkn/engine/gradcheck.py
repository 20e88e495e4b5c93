"""Finite-difference verification of analytic gradients.

``grad_check`` replays a deterministic forward closure under a tape, then
perturbs parameter coordinates with central differences and reports the
worst relative disagreement, normalized as |analytic - numeric| / max(1,
|numeric|).  Double precision only; step sizes around 1e-5..1e-3 are
appropriate for the operators in this package.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def grad_check(forward, params: list[Tensor], h: float = 1e-5,
               max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``forward`` must be a zero-argument closure returning a scalar Tensor,
    deterministic, and re-evaluable (it is called 2x per checked coordinate).
    ``max_coords`` caps the number of coordinates checked per parameter
    (sampled with ``rng``); by default every coordinate is checked.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")

    with Tape() as tape:
        loss = forward()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                raise ValueError("max_coords sampling needs an rng")
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = forward().item()
            flat[i] = orig - h
            down = forward().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(ana.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
