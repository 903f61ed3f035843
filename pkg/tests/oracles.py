"""Straight-line re-implementations used as test oracles.

Attention is spelled out head by head with plain softmax, layer norm and
GELU written from their formulas, independently of the package code paths.
"""

import math

import torch


def ln(t, w, b, eps=1e-5):
    c = t - t.mean(-1, keepdim=True)
    return c / torch.sqrt((c * c).mean(-1, keepdim=True) + eps) * w + b


def gelu(t):
    return 0.5 * t * (1 + torch.erf(t / math.sqrt(2)))


def lin(layer, t):
    return t @ layer.weight.T + layer.bias


def mha(att, X, Y, mask=None):
    dh = att.d // att.heads
    q, k, v = lin(att.w_q, X), lin(att.w_k, Y), lin(att.w_v, Y)
    heads = []
    for h in range(att.heads):
        s = slice(h * dh, (h + 1) * dh)
        logits = q[:, s] @ k[:, s].T / math.sqrt(dh)
        if mask is not None:
            logits = logits.masked_fill(~mask, -math.inf)
        heads.append(torch.softmax(logits, dim=-1) @ v[:, s])
    return lin(att.w_o, torch.cat(heads, dim=-1))


def mab(block, X, Y, mask=None):
    H = ln(X + mha(block.attn, X, Y, mask), block.ln1.weight, block.ln1.bias)
    f = lin(block.ff.fc2, gelu(lin(block.ff.fc1, H)))
    return ln(H + f, block.ln2.weight, block.ln2.bias)


def isab(block, X, mask=None):
    return mab(block.mab1, X, mab(block.mab0, block.inducing, X, mask))
