"""Central finite-difference verification of hand-written gradients.

The checker perturbs every scalar parameter in place, re-evaluates the loss,
and compares the resulting two-sided difference quotient against the
analytic gradient. It never touches the backward implementation, so it
stays an independent oracle for it.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import EvaluationError

DEFAULT_STEP = 1e-5


def finite_difference(
    params: dict[str, np.ndarray],
    loss_fn: Callable[[], float],
    step: float = DEFAULT_STEP,
) -> dict[str, np.ndarray]:
    """Central differences of loss_fn w.r.t. every entry of every array."""
    fd = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn()
            flat[i] = orig - step
            lm = loss_fn()
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise EvaluationError(f"non-finite loss while perturbing {name}[{i}]")
            gflat[i] = (lp - lm) / (2.0 * step)
        fd[name] = g
    return fd


def max_relative_error(
    analytic: dict[str, np.ndarray], fd: dict[str, np.ndarray]
) -> float:
    """max over parameters of |g_a - g_fd| / max(1, |g_a|, |g_fd|)."""
    worst = 0.0
    for name, ga in analytic.items():
        gf = fd[name]
        denom = np.maximum(1.0, np.maximum(np.abs(ga), np.abs(gf)))
        err = np.abs(ga - gf) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def gradcheck(
    params: dict[str, np.ndarray],
    loss_fn: Callable[[], float],
    grad_fn: Callable[[], dict[str, np.ndarray]],
    step: float = DEFAULT_STEP,
) -> float:
    """Return the max relative error between analytic and FD gradients.

    loss_fn and grad_fn close over ``params`` and must reflect in-place
    perturbations; loss_fn must be deterministic.
    """
    base = loss_fn()
    if not np.isfinite(base):
        raise EvaluationError("loss is non-finite at the evaluation point")
    analytic = grad_fn()
    fd = finite_difference(params, loss_fn, step=step)
    return max_relative_error(analytic, fd)
