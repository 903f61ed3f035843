"""AdamW with decoupled weight decay and a cosine schedule with warm restarts."""

from __future__ import annotations

import math
from collections.abc import Iterable

import torch

from ..nn_core import ShapeMismatch


def adamw_update(p, g, m, v, step: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
    """One AdamW step; returns ``(p, m, v)``. Works on floats, numpy arrays or tensors."""
    if step < 1:
        raise ValueError(f"step counts from 1, got {step}")
    if getattr(p, "shape", ()) != getattr(g, "shape", ()):
        raise ShapeMismatch(f"parameter shape {p.shape} differs from gradient shape {g.shape}")
    p = p - lr * weight_decay * p
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    p = p - lr * m_hat / (v_hat**0.5 + eps)
    return p, m, v


class AdamW:
    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, grad_clip: float | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        if self.grad_clip is not None:
            norm = torch.sqrt(sum((g**2).sum() for g in grads))
            scale = min(1.0, self.grad_clip / (float(norm) + 1e-12))
            grads = [g * scale for g in grads]
        b1, b2 = self.betas
        for i, (p, g) in enumerate(zip(self.params, grads)):
            new_p, self.m[i], self.v[i] = adamw_update(
                p, g, self.m[i], self.v[i], self.step_count, self.lr, b1, b2, self.eps,
                self.weight_decay,
            )
            p.copy_(new_p)


def cosine_lr(t: int, start: float, minimum: float, t_max: int) -> float:
    """Cosine annealing from ``start`` at ``t = 0`` to ``minimum`` at ``t = t_max``.

    The schedule then restarts: each cycle spans ``t_max + 1`` steps.
    """
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    if t_max < 1:
        raise ValueError(f"t_max must be at least 1, got {t_max}")
    phase = t % (t_max + 1)
    return minimum + 0.5 * (start - minimum) * (1 + math.cos(math.pi * phase / t_max))
