"""Losses, single optimisation steps and evaluation."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..data import Batch, Sample
from ..model import predict_logits
from ..nn_core import backward
from .masking import batch_masks
from .metrics import MissingLabels, SampleMetrics, mean_metrics, sample_metrics


def masked_l1(pred: torch.Tensor, target: torch.Tensor, hidden: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over hidden positions only."""
    count = hidden.sum()
    if int(count) == 0:
        raise ValueError("no hidden positions to score")
    diff = torch.where(hidden, (pred - target).abs(), torch.zeros_like(pred))
    return diff.sum() / count


def mae_loss(batch: Batch, model, ratio: float, rng: np.random.Generator,
             hidden: torch.Tensor | None = None) -> torch.Tensor:
    if hidden is None:
        hidden = batch_masks(batch, ratio, rng)
    pred = model.reconstruct(batch, visible=~hidden)
    return masked_l1(pred, batch.values, hidden)


def mae_step(batch: Batch, model, ratio: float, rng: np.random.Generator) -> torch.Tensor:
    loss = mae_loss(batch, model, ratio, rng)
    backward(loss)
    return loss


def bce_loss(logits: torch.Tensor, labels: torch.Tensor, event_mask: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over genuine (unpadded) events."""
    per_event = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    valid = event_mask.to(per_event.dtype)
    return (per_event * valid).sum() / valid.sum()


def supervised_loss(batch: Batch, model) -> torch.Tensor:
    if batch.labels is None:
        raise MissingLabels("supervised training needs every event labelled")
    return bce_loss(model(batch), batch.labels, batch.event_mask)


def supervised_step(batch: Batch, model) -> torch.Tensor:
    loss = supervised_loss(batch, model)
    backward(loss)
    return loss


def predict(model, sample: Sample, threshold: float = 0.5) -> np.ndarray:
    """Events called positive: ``sigmoid(logit) > threshold``."""
    logits = np.clip(predict_logits(model, sample), -500.0, 500.0)
    return 1.0 / (1.0 + np.exp(-logits)) > threshold


def evaluate(samples: list[Sample], model, threshold: float = 0.5) -> tuple[list[SampleMetrics], dict]:
    """Per-sample metrics and their unweighted mean."""
    was_training = model.training
    model.eval()
    per_sample = []
    for s in samples:
        if s.labels is None:
            raise MissingLabels(f"sample {s.sample_id!r} has no labels")
        per_sample.append(sample_metrics(predict(model, s, threshold), s.labels, s.sample_id))
    model.train(was_training)
    return per_sample, mean_metrics(per_sample)
