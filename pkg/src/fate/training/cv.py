"""Leave-one-patient-out splits with patient-level train/validation assignment."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ..data import Sample


class TooFewPatients(ValueError):
    pass


@dataclass(frozen=True)
class CvSplit:
    held_out_patient: str
    train: list[str]
    val: list[str]
    test: list[str]


def _by_patient(samples: list[Sample]) -> OrderedDict[str, list[str]]:
    groups: OrderedDict[str, list[str]] = OrderedDict()
    for s in samples:
        groups.setdefault(s.patient_id, []).append(s.sample_id)
    return groups


def _assign_val(sizes: dict[str, int], val_ratio: float, rng: np.random.Generator) -> set[str]:
    patients = list(sizes)
    if len(patients) < 2:
        return set()
    order = [patients[i] for i in rng.permutation(len(patients))]
    target = val_ratio * sum(sizes.values())
    val: list[str] = []
    total = 0
    for pid in order:
        if abs(total + sizes[pid] - target) < abs(total - target):
            val.append(pid)
            total += sizes[pid]
    if not val:
        val.append(min(order, key=lambda pid: sizes[pid]))
    if len(val) == len(patients):
        val.remove(max(val, key=lambda pid: sizes[pid]))
    return set(val)


def patient_cv(samples: list[Sample], val_ratio: float = 0.2,
               rng: np.random.Generator | None = None) -> list[CvSplit]:
    """One split per patient: that patient's samples form the test set.

    The other patients go whole to train or validation, so that the
    validation share of samples lands as close to ``val_ratio`` as whole
    patients allow. With only one remaining patient the validation set is
    empty.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample IDs must be unique for cross-validation")
    groups = _by_patient(samples)
    if len(groups) < 2:
        raise TooFewPatients(f"patient cross-validation needs at least 2 patients, got {len(groups)}")
    splits = []
    for held_out, test in groups.items():
        rest = {pid: len(sids) for pid, sids in groups.items() if pid != held_out}
        val_patients = _assign_val(rest, val_ratio, rng)
        train = [sid for pid in rest if pid not in val_patients for sid in groups[pid]]
        val = [sid for pid in rest if pid in val_patients for sid in groups[pid]]
        splits.append(CvSplit(held_out, train, val, list(test)))
    return splits
