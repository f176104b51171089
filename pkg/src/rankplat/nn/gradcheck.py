"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over checked entries of |analytic - numeric| / max(1, |analytic|).

    ``loss_fn`` must rebuild the scalar loss from the current values of
    ``params``. With ``max_entries`` only that many randomly chosen entries
    per parameter are perturbed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = float(loss_fn().data)
                flat[i] = orig - h
                down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        p.grad = None
    return worst
