"""Adam with global-norm clipping, L2 weight decay and an exponential lr schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    total_epochs: int = 1
    weight_decay: float = 0.0
    clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return lr_at(self.epoch, self.lr_start, self.lr_end, self.total_epochs)


def lr_at(epoch: int, start: float, end: float, total_epochs: int) -> float:
    """Exponential per-epoch decay from ``start`` (epoch 0) to ``end`` (last epoch)."""
    if total_epochs <= 1:
        return start
    frac = min(max(epoch, 0), total_epochs - 1) / (total_epochs - 1)
    return start * math.exp(frac * math.log(end / start))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(opt: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One Adam update, in place. Clipping acts on the raw gradients, then decay is added."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    grads, _ = clip_by_global_norm(grads, opt.clip_norm)
    opt.step += 1
    lr = opt.lr
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1 - b1**opt.step
    c2 = 1 - b2**opt.step
    for name, g in grads.items():
        p = params[name]
        if opt.weight_decay:
            g = g + opt.weight_decay * p
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params
