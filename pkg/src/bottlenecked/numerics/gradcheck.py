"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NumericsError, Tensor, backward, no_grad


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-12,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and rebuilds a scalar loss from the current
    contents of ``params`` (which are perturbed in place and restored). The
    relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if any(p.dtype != np.float64 for p in params):
        raise NumericsError("finite_diff_check needs float64 parameters")
    for p in params:
        p.grad = None
    loss = f()
    with no_grad():
        again = f()
    if loss.item() != again.item():
        raise NumericsError("finite_diff_check: f is not deterministic")
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            ga = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
                worst = max(worst, err)
    return worst
