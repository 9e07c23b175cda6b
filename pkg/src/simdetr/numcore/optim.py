from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class MissingGradError(RuntimeError):
    pass


def adamw_step(params: Mapping[str, Tensor], state: OptimState,
               names: Iterable[str] | None = None) -> None:
    """One AdamW update in place.

    Weight decay is decoupled: weights shrink by ``lr * weight_decay`` before
    the moment-based step. ``names`` restricts the update to the trainable
    subset; every listed parameter must carry a gradient.
    """
    names = sorted(params) if names is None else sorted(names)
    for name in names:
        if params[name].grad is None:
            raise MissingGradError(f"no gradient for trainable parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in names:
        p = params[name]
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float,
                   names: Iterable[str] | None = None) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    names = sorted(params) if names is None else sorted(names)
    names = [n for n in names if params[n].grad is not None]
    total = float(np.sqrt(sum(float(np.sum(params[n].grad ** 2)) for n in names)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for n in names:
            # reassign: a 0-d gradient may be a numpy scalar, which in-place ops would not touch
            params[n].grad = np.asarray(params[n].grad * scale, dtype=np.float64)
    return total
