"""Sample container and padded batch assembly."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import torch


class SampleError(ValueError):
    pass


@dataclass
class Sample:
    """One measured sample: ``n`` events over the features listed in ``panel``.

    ``panel[j]`` is the registry ID of column ``j`` of ``events``. ``labels``
    marks blast events (positive class) when known.
    """

    panel: np.ndarray
    events: np.ndarray
    patient_id: str = ""
    sample_id: str = ""
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.panel = np.asarray(self.panel, dtype=np.int64).reshape(-1)
        self.events = np.asarray(self.events, dtype=np.float64)
        if self.events.ndim != 2:
            raise SampleError(f"events must be 2-D, got shape {self.events.shape}")
        n, f = self.events.shape
        if f != len(self.panel):
            raise SampleError(f"panel has {len(self.panel)} IDs but events have {f} columns")
        if f < 1:
            raise SampleError("a sample needs at least one feature")
        if len(set(self.panel.tolist())) != f:
            raise SampleError("panel IDs must be distinct")
        if n < 1:
            raise SampleError(f"sample {self.sample_id!r} has no events")
        if not np.isfinite(self.events).all():
            raise SampleError(f"sample {self.sample_id!r} contains NaN or Inf")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(bool).reshape(-1)
            if len(self.labels) != n:
                raise SampleError(
                    f"sample {self.sample_id!r}: {len(self.labels)} labels for {n} events"
                )

    @property
    def n_events(self) -> int:
        return self.events.shape[0]

    @property
    def n_features(self) -> int:
        return self.events.shape[1]

    def subset(self, index: np.ndarray) -> Sample:
        return Sample(
            panel=self.panel,
            events=self.events[index],
            patient_id=self.patient_id,
            sample_id=self.sample_id,
            labels=None if self.labels is None else self.labels[index],
            meta=self.meta,
        )

    def permute_features(self, order: np.ndarray) -> Sample:
        return Sample(
            panel=self.panel[order],
            events=self.events[:, order],
            patient_id=self.patient_id,
            sample_id=self.sample_id,
            labels=self.labels,
            meta=self.meta,
        )


@dataclass
class Batch:
    """Samples padded to a common event count and panel length.

    ``event_mask`` and ``feature_mask`` are True at genuine positions.
    Padded panel slots carry ID 0 and value 0; they are never attended to.
    """

    values: torch.Tensor  # (B, n, F)
    panel: torch.Tensor  # (B, F) long
    event_mask: torch.Tensor  # (B, n) bool
    feature_mask: torch.Tensor  # (B, F) bool
    labels: torch.Tensor | None  # (B, n) float
    sample_ids: list[str]

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def to(self, dtype: torch.dtype) -> Batch:
        return Batch(
            self.values.to(dtype),
            self.panel,
            self.event_mask,
            self.feature_mask,
            None if self.labels is None else self.labels.to(dtype),
            self.sample_ids,
        )


def subsample(sample: Sample, cap: int | None, rng: np.random.Generator | None) -> Sample:
    """Uniformly draw ``cap`` events without replacement when the sample is larger."""
    if cap is None or sample.n_events <= cap:
        return sample
    if rng is None:
        raise SampleError("subsampling needs a random generator")
    index = np.sort(rng.choice(sample.n_events, size=cap, replace=False))
    return sample.subset(index)


def fixed_subsample(sample: Sample, cap: int | None) -> Sample:
    """Deterministic subsample keyed on the sample ID, so replays pick the same events."""
    if cap is None or sample.n_events <= cap:
        return sample
    rng = np.random.default_rng(zlib.crc32(sample.sample_id.encode()))
    return subsample(sample, cap, rng)


def collate(
    samples: list[Sample],
    dtype: torch.dtype = torch.float32,
    event_cap: int | None = None,
    rng: np.random.Generator | None = None,
) -> Batch:
    if not samples:
        raise SampleError("cannot collate an empty list of samples")
    samples = [subsample(s, event_cap, rng) for s in samples]
    B = len(samples)
    n = max(s.n_events for s in samples)
    F = max(s.n_features for s in samples)
    values = np.zeros((B, n, F))
    panel = np.zeros((B, F), dtype=np.int64)
    event_mask = np.zeros((B, n), dtype=bool)
    feature_mask = np.zeros((B, F), dtype=bool)
    has_labels = all(s.labels is not None for s in samples)
    labels = np.zeros((B, n)) if has_labels else None
    for b, s in enumerate(samples):
        values[b, : s.n_events, : s.n_features] = s.events
        panel[b, : s.n_features] = s.panel
        event_mask[b, : s.n_events] = True
        feature_mask[b, : s.n_features] = True
        if labels is not None:
            labels[b, : s.n_events] = s.labels
    return Batch(
        values=torch.as_tensor(values, dtype=dtype),
        panel=torch.as_tensor(panel),
        event_mask=torch.as_tensor(event_mask),
        feature_mask=torch.as_tensor(feature_mask),
        labels=None if labels is None else torch.as_tensor(labels, dtype=dtype),
        sample_ids=[s.sample_id for s in samples],
    )
