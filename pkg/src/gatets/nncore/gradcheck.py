"""Central finite-difference checks for the reverse-mode gradients.

The scalar probed is ``sum(fn() * R)`` with a fixed random ``R``; a plain sum
would make some checks vacuous (softmax rows always sum to one).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(
    fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5, weights: np.ndarray | None = None
) -> np.ndarray:
    """d sum(fn() * weights) / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _probe(fn(), weights)
            flat[i] = orig - h
            fm = _probe(fn(), weights)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _probe(out: Tensor, weights: np.ndarray | None) -> float:
    return float(np.sum(out.data if weights is None else out.data * weights))


def analytic_gradient(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], weights: np.ndarray | None = None
) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn()
    out.backward(np.ones_like(out.data) if weights is None else weights)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor keeps an exactly-zero true gradient (a key bias, which softmax
    cancels) from turning FD round-off into a relative error of 1.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    seed: int = 0,
    perturb: float = 0.0,
) -> float:
    """Worst relative error between analytic and FD gradients over ``inputs``.

    Each input is compared on its own; the floor of the denominator is
    ``1e-3`` times the norm of the full analytic gradient, so inputs whose
    true gradient vanishes are judged against the overall gradient scale.
    ``perturb`` scales the analytic gradient (used to prove checks can fail).
    """
    with no_grad():
        shape = fn().shape
    weights = np.random.default_rng(seed).standard_normal(shape)
    analytic = [g * (1.0 + perturb) for g in analytic_gradient(fn, inputs, weights)]
    scale = float(np.sqrt(sum(np.sum(g * g) for g in analytic)))
    floor = max(1e-3 * scale, 1e-12)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        gn = numerical_gradient(fn, t, h, weights)
        worst = max(worst, relative_error(ga, gn, floor))
    return worst
