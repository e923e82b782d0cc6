"""Parameter store, AdamW with decoupled weight decay, cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import RangeError, ShapeError, StateError
from .tensor import Tensor


class ParamStore:
    """Named parameters, iterated in lexicographic name order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data, decay: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = Tensor(data, requires_grad=True, decay=decay)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore()
        for n, t in self.items():
            other.add(n, t.data.astype(dtype), decay=t.decay)
        return other


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(store: ParamStore, state: OptimState, lr: float, beta1: float = 0.9,
               beta2: float = 0.99, weight_decay: float = 0.05, eps: float = 1e-8) -> None:
    """One bias-corrected AdamW update of every parameter in ``store``.

    Decay is decoupled (``w -= lr * wd * w``) and skipped for tensors whose
    ``decay`` flag is off.
    """
    for name, p in store.items():
        if p.grad is None:
            raise StateError(f"adamw_step: parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if p.decay and weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


@dataclass
class RowOptimState:
    """AdamW moments for a row-addressed table updated a few rows at a time.

    Each row keeps its own step count, so bias correction follows the row's
    own update history rather than the global step.
    """

    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray

    @classmethod
    def zeros_like(cls, table: np.ndarray) -> "RowOptimState":
        return cls(np.zeros_like(table), np.zeros_like(table), np.zeros(table.shape[0], np.int64))


def adamw_rows(table: np.ndarray, rows: np.ndarray, grads: np.ndarray, state: RowOptimState,
               lr: float, beta1: float = 0.9, beta2: float = 0.99,
               weight_decay: float = 0.05, eps: float = 1e-8) -> None:
    """AdamW on ``table[rows]`` only; untouched rows and their moments stay put."""
    rows = np.asarray(rows, dtype=np.int64)
    if grads.shape != (len(rows),) + table.shape[1:]:
        raise ShapeError(f"adamw_rows: grads {grads.shape} for {len(rows)} rows")
    if len(np.unique(rows)) != len(rows):
        raise ShapeError("adamw_rows: duplicate rows")
    if not len(rows):
        return
    state.steps[rows] += 1
    t = state.steps[rows][:, None]
    m = beta1 * state.m[rows] + (1.0 - beta1) * grads
    v = beta2 * state.v[rows] + (1.0 - beta2) * grads * grads
    state.m[rows] = m
    state.v[rows] = v
    w = table[rows]
    if weight_decay:
        w = w - lr * weight_decay * w
    w = w - lr * (m / (1.0 - beta1 ** t)) / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
    table[rows] = w.astype(table.dtype, copy=False)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if step < 0 or step > total_steps:
        raise RangeError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
