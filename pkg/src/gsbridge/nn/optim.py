from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .layers import Module, Parameter


class ParameterStore:
    """Named parameters with their Adam moment buffers."""

    def __init__(self, params: dict[str, Parameter] | Module):
        if isinstance(params, Module):
            params = params.parameters()
        self.params: OrderedDict[str, Parameter] = OrderedDict(params)
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.step = 0

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def state_arrays(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, p.value) for k, p in self.params.items())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in self.params.items():
            value = np.asarray(arrays[k], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {value.shape} != {p.value.shape}")
            p.value[...] = value


def adam_step(store: ParameterStore, lr: float = 3.5e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, max_grad_norm: float | None = None) -> ParameterStore:
    """One bias-corrected Adam update, in place."""
    for name, p in store.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r} at step {store.step}")
    scale = 1.0
    if max_grad_norm is not None:
        total = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in store.params.values()))
        if total > max_grad_norm:
            scale = max_grad_norm / total
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for name, p in store.params.items():
        g = p.grad * scale
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def cosine_lr(step: int, total: int, lr: float, floor: float = 0.1) -> float:
    """Cosine decay from ``lr`` to ``floor * lr`` over ``total`` steps."""
    frac = min(step / max(total, 1), 1.0)
    return lr * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))
