"""Central finite differences for checking hand-written backward passes."""
from __future__ import annotations

import numpy as np


def numerical_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """d f / d x for a scalar function ``f`` of the array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a - b| relative to the larger gradient magnitude."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def sampled_parameter_errors(module, loss, rng: np.random.Generator, per_tensor: int = 3,
                             eps: float = 1e-6, floor: float = 1e-5) -> dict[str, float]:
    """Worst relative error per parameter tensor over a few randomly chosen entries.

    ``module`` must hold the analytic gradients of ``loss()`` in ``.grad``.
    Each error is measured against the larger of the tensor's largest analytic
    gradient and the numerical value, with an absolute ``floor`` for tensors
    the loss is invariant to (biases ahead of a normalisation).
    """
    worst = {}
    for name, p in module.parameters().items():
        flat, grad = p.value.reshape(-1), p.grad.reshape(-1)
        scale = max(np.abs(grad).max(), floor)
        err = 0.0
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            hi = loss()
            flat[i] = old - eps
            lo = loss()
            flat[i] = old
            num = (hi - lo) / (2 * eps)
            err = max(err, abs(num - grad[i]) / max(scale, abs(num)))
        worst[name] = err
    return worst
