"""Attention blocks of the Set Transformer and a guarded backward pass.

Tensors are torch tensors; reverse-mode gradients come from torch autograd.
All blocks accept arbitrary leading batch dimensions: ``X`` is ``(..., n, d)``
and masks are ``(..., n)`` booleans with True marking valid rows.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-5


class ShapeMismatch(ValueError):
    pass


class AllKeysMasked(ValueError):
    pass


class NotScalarLoss(ValueError):
    pass


class GraphReused(RuntimeError):
    pass


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact Gaussian-CDF form, not the tanh approximation
    return F.gelu(x)


def layer_norm(x: torch.Tensor, weight=None, bias=None, eps: float = LN_EPS) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def masked_softmax(logits: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis; masked keys get exactly zero weight.

    ``key_mask`` broadcasts against ``logits`` along the last axis.
    """
    if key_mask is not None:
        if not key_mask.any(dim=-1).all():
            raise AllKeysMasked("some query row has no valid key to attend to")
        logits = logits.masked_fill(~key_mask, float("-inf"))
    shifted = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.exp(shifted)
    return weights / weights.sum(dim=-1, keepdim=True)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = LN_EPS):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


def uniform_fan_in_(layer: nn.Linear) -> nn.Linear:
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    if layer.bias is not None:
        nn.init.uniform_(layer.bias, -bound, bound)
    return layer


def linear(d_in: int, d_out: int) -> nn.Linear:
    return uniform_fan_in_(nn.Linear(d_in, d_out))


class MultiheadAttention(nn.Module):
    """Scaled dot-product attention with ``heads`` heads of width ``d // heads``."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if heads < 1 or d % heads:
            raise ShapeMismatch(f"head count {heads} must divide width {d}")
        self.d = d
        self.heads = heads
        self.w_q = linear(d, d)
        self.w_k = linear(d, d)
        self.w_v = linear(d, d)
        self.w_o = linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.d // self.heads).transpose(-2, -3)

    def attention_weights(self, Q, K, key_mask=None) -> torch.Tensor:
        """Per-head attention matrix of shape ``(..., heads, n_q, n_k)``."""
        q = self._split(self.w_q(Q))
        k = self._split(self.w_k(K))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d // self.heads)
        mask = None if key_mask is None else key_mask[..., None, None, :]
        return masked_softmax(logits, mask)

    def forward(self, Q, K, V, key_mask=None) -> torch.Tensor:
        _check_width(self.d, Q, K, V)
        if K.shape[-2] != V.shape[-2]:
            raise ShapeMismatch(f"{K.shape[-2]} keys but {V.shape[-2]} values")
        if key_mask is not None and key_mask.shape[-1] != K.shape[-2]:
            raise ShapeMismatch(f"key mask covers {key_mask.shape[-1]} of {K.shape[-2]} keys")
        if K.shape[-2] == 1:
            if key_mask is not None and not key_mask.all():
                raise AllKeysMasked("the only key is masked")
            # softmax over a single key is exactly 1 for every query
            out = self.w_o(self.w_v(V))
            return out.expand(*torch.broadcast_shapes(Q.shape[:-2], out.shape[:-2]), Q.shape[-2], self.d)
        q = self._split(self.w_q(Q))
        k = self._split(self.w_k(K))
        v = self._split(self.w_v(V))
        mask = None
        if key_mask is not None:
            if not key_mask.any(dim=-1).all():
                raise AllKeysMasked("some query row has no valid key to attend to")
            mask = key_mask[..., None, None, :]
        # fused kernel; same result as attention_weights(Q, K, key_mask) @ v
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        *lead, h, n_q, dh = out.shape
        out = out.transpose(-2, -3).reshape(*lead, n_q, h * dh)
        return self.w_o(out)


def _check_width(d: int, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if t.dim() < 2 or t.shape[-1] != d:
            raise ShapeMismatch(f"expected rows of width {d}, got shape {tuple(t.shape)}")


def multihead_attention(Q, K, V, params: MultiheadAttention, key_mask=None) -> torch.Tensor:
    return params(Q, K, V, key_mask)


class RowFF(nn.Module):
    """Row-wise linear, GELU, linear."""

    def __init__(self, d: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d
        self.fc1 = linear(d, hidden)
        self.fc2 = linear(hidden, d)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class MAB(nn.Module):
    """Post-norm multihead attention block.

    ``H = LN(X + MHA(X, Y, Y))`` then ``LN(H + rFF(H))``.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.attn = MultiheadAttention(d, heads)
        self.ln1 = LayerNorm(d)
        self.ff = RowFF(d)
        self.ln2 = LayerNorm(d)

    def forward(self, X, Y, key_mask=None):
        h = self.ln1(X + self.attn(X, Y, Y, key_mask))
        return self.ln2(h + self.ff(h))


class SAB(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.mab = MAB(d, heads)

    def forward(self, X, mask=None):
        return self.mab(X, X, mask)


class ISAB(nn.Module):
    """Induced self-attention: ``m`` learned points summarise the set, then the
    set attends back to the summary, at cost O(n m)."""

    def __init__(self, d: int, heads: int, m: int):
        super().__init__()
        if m < 1:
            raise ShapeMismatch(f"need at least one induced point, got {m}")
        self.inducing = nn.Parameter(torch.empty(m, d))
        nn.init.normal_(self.inducing, 0.0, 1.0 / math.sqrt(d))
        self.mab0 = MAB(d, heads)
        self.mab1 = MAB(d, heads)

    def forward(self, X, event_mask=None):
        _check_width(self.inducing.shape[1], X)
        if X.shape[-2] < 1:
            raise ShapeMismatch("ISAB needs at least one element")
        I = self.inducing.expand(*X.shape[:-2], *self.inducing.shape)
        H = self.mab0(I, X, event_mask)
        return self.mab1(X, H)


def mab(X, Y, params: MAB, key_mask=None):
    return params(X, Y, key_mask)


def isab(X, params: ISAB, event_mask=None):
    return params(X, event_mask)


def backward(loss: torch.Tensor, params=None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Raises :class:`GraphReused` when called twice on the same loss rather than
    silently accumulating gradients. Tensors in ``params`` that the loss does
    not reach get an all-zero gradient instead of ``None``.
    """
    if loss.numel() != 1:
        raise NotScalarLoss(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if getattr(loss, "_fate_backward_done", False):
        raise GraphReused("backward was already run on this loss")
    if not loss.requires_grad:
        raise NotScalarLoss("loss does not depend on any trainable tensor")
    loss.backward()
    loss._fate_backward_done = True
    for p in params or ():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
