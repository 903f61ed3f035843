"""Per-event feature masking for masked-autoencoder pre-training."""

from __future__ import annotations

import math

import numpy as np
import torch

from ..data import Batch


class TooFewFeatures(ValueError):
    pass


def masked_count(n_features: int, ratio: float) -> int:
    """Features hidden per event: ``round_half_up(ratio * F)`` clamped to ``[1, F - 1]``."""
    if n_features < 2:
        raise TooFewFeatures(
            f"an event with {n_features} feature(s) cannot keep one feature visible and hide another"
        )
    if not 0 < ratio < 1:
        raise ValueError(f"masking ratio must lie in (0, 1), got {ratio}")
    # the epsilon absorbs products like 0.35 * 10 = 3.4999999999999996
    k = math.floor(ratio * n_features + 0.5 + 1e-9)
    return min(max(k, 1), n_features - 1)


def make_masks(n_events: int, n_features: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """``(n_events, n_features)`` booleans, True where the value is hidden.

    Each row hides exactly ``masked_count`` positions, drawn uniformly
    without replacement and independently per row.
    """
    k = masked_count(n_features, ratio)
    ranks = rng.random((n_events, n_features)).argsort(axis=1).argsort(axis=1)
    return ranks < k


def make_mask(n_features: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    return make_masks(1, n_features, ratio, rng)[0]


def batch_masks(batch: Batch, ratio: float, rng: np.random.Generator) -> torch.Tensor:
    """Hidden-position mask ``(B, n, F)`` for a padded batch.

    Only genuine features of genuine events are ever hidden.
    """
    B, n, F = batch.values.shape
    hidden = np.zeros((B, n, F), dtype=bool)
    n_valid = batch.event_mask.sum(dim=1).tolist()
    f_valid = batch.feature_mask.sum(dim=1).tolist()
    for b in range(B):
        hidden[b, : n_valid[b], : f_valid[b]] = make_masks(n_valid[b], f_valid[b], ratio, rng)
    return torch.as_tensor(hidden)
