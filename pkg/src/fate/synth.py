"""Synthetic cytometry-like corpora with heterogeneous panels and rare blasts.

Healthy events come from a Gaussian mixture shared by all patients (with a
small per-patient jitter); each patient's blasts are a copy of one healthy
population that takes a shared stem-like signature (CD34 high, CD45 dim)
and is shifted along a random subset of that patient's other markers. Values
live in [0, 1]; with ``standardize`` (the default) each sample is then
z-scored per channel, matching the default transform for real files, so the
written manifests use the identity transform.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .data import Sample
from .registry import FeatureRegistry

MARKERS = [
    "FSC-A", "SSC-A", "CD45", "CD34", "CD117", "CD33", "HLA-DR", "CD38",
    "CD13", "CD7", "CD123", "CD15", "CD14", "CD11B", "CD99", "CD371",
    "CD45RA", "CD10", "CD56", "CD19",
]


CD45, CD34 = MARKERS.index("CD45"), MARKERS.index("CD34")


class SpecInvalid(ValueError):
    pass


class SynthSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_markers: int = 12
    core_markers: int = 4
    panel_min: int = 8
    panel_max: int = 12
    patients: int = 6
    samples_per_patient: int | list[int] = 3
    events_min: int = 1_000
    events_max: int = 3_000
    mrd_min: float = 0.005
    mrd_max: float = 0.3
    mrd_fraction: float | None = None  # fixes every sample's blast fraction
    healthy_clusters: int = 5
    cluster_sd_min: float = 0.04
    cluster_sd_max: float = 0.09
    patient_jitter: float = 0.03
    blast_shift_min: float = 0.15
    blast_shift_max: float = 0.4
    shift_share_min: float = 0.3
    shift_share_max: float = 0.6
    control_samples: int = 16
    diagnosis_samples: int = 16
    diagnosis_min: float = 0.5
    diagnosis_max: float = 0.9
    signature: bool = True  # shared CD34-high / CD45-dim blast phenotype
    standardize: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.patients < 1:
            raise ValueError("patients must be at least 1")
        if not 1 <= self.core_markers <= self.panel_min <= self.panel_max <= self.n_markers:
            raise ValueError("need 1 <= core_markers <= panel_min <= panel_max <= n_markers")
        if self.panel_min < 2:
            raise ValueError("panels need at least two markers")
        counts = self.samples_per_patient
        if isinstance(counts, list):
            if len(counts) != self.patients or min(counts) < 1:
                raise ValueError("samples_per_patient list needs one positive count per patient")
        elif counts < 1:
            raise ValueError("samples_per_patient must be at least 1")
        if not 1 <= self.events_min <= self.events_max:
            raise ValueError("need 1 <= events_min <= events_max")
        for lo, hi in ((self.mrd_min, self.mrd_max), (self.diagnosis_min, self.diagnosis_max)):
            if not 0 < lo <= hi < 1:
                raise ValueError("fraction ranges must satisfy 0 < min <= max < 1")
        if self.mrd_fraction is not None and not 0 < self.mrd_fraction < 1:
            raise ValueError("mrd_fraction must lie in (0, 1)")
        if self.healthy_clusters < 1 or self.control_samples < 0 or self.diagnosis_samples < 0:
            raise ValueError("cluster and pre-training sample counts must be non-negative")
        if not 0 < self.shift_share_min <= self.shift_share_max <= 1:
            raise ValueError("shift shares must satisfy 0 < min <= max <= 1")
        return self

    @classmethod
    def parse(cls, doc: dict) -> SynthSpec:
        try:
            return cls.model_validate(doc)
        except ValidationError as exc:
            raise SpecInvalid(str(exc)) from exc

    def counts(self) -> list[int]:
        c = self.samples_per_patient
        return list(c) if isinstance(c, list) else [c] * self.patients


def marker_names(n: int) -> list[str]:
    return MARKERS[:n] + [f"M{k}" for k in range(len(MARKERS), n)]


@dataclass
class SynthPatient:
    patient_id: str
    panel: np.ndarray  # global marker indices
    means: np.ndarray  # (K, M)
    sds: np.ndarray  # (K, M)
    weights: np.ndarray  # (K,)
    blast_mean: np.ndarray  # (M,)
    blast_sd: np.ndarray  # (M,)


@dataclass
class SynthCorpus:
    target: list[Sample]
    pretrain: list[Sample]
    registry: FeatureRegistry
    patients: list[SynthPatient]


class _World:
    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        K, M = spec.healthy_clusters, spec.n_markers
        self.spec = spec
        self.means = rng.uniform(0.1, 0.9, size=(K, M))
        self.sds = rng.uniform(spec.cluster_sd_min, spec.cluster_sd_max, size=(K, M))
        self.weights = rng.dirichlet(np.full(K, 4.0))

    def patient(self, pid: str, rng: np.random.Generator, panel=None) -> SynthPatient:
        spec = self.spec
        if panel is None:
            panel = self.panel(rng)
        means = np.clip(self.means + rng.normal(0, spec.patient_jitter, self.means.shape), 0.02, 0.98)
        weights = rng.dirichlet(self.weights * 40)
        donor = rng.integers(spec.healthy_clusters)
        share = rng.uniform(spec.shift_share_min, spec.shift_share_max)
        n_shift = max(1, int(round(share * len(panel))))
        shifted = rng.choice(panel, size=n_shift, replace=False)
        blast_mean = means[donor].copy()
        for m in shifted:
            size = rng.uniform(spec.blast_shift_min, spec.blast_shift_max)
            sign = 1.0 if blast_mean[m] < 0.5 else -1.0  # toward the side with room
            blast_mean[m] = np.clip(blast_mean[m] + sign * size, 0.0, 1.0)
        if spec.signature and spec.core_markers >= 4:
            blast_mean[CD45] = min(blast_mean[CD45], rng.uniform(0.2, 0.35))
            blast_mean[CD34] = max(blast_mean[CD34], rng.uniform(0.5, 0.7))
        return SynthPatient(pid, np.sort(panel), means, self.sds.copy(), weights,
                            blast_mean, self.sds[donor].copy())

    def panel(self, rng: np.random.Generator) -> np.ndarray:
        spec = self.spec
        size = rng.integers(spec.panel_min, spec.panel_max + 1)
        extras = rng.choice(np.arange(spec.core_markers, spec.n_markers),
                            size=size - spec.core_markers, replace=False)
        return np.concatenate([np.arange(spec.core_markers), extras])


def _draw_events(patient: SynthPatient, n: int, fraction: float, rng: np.random.Generator):
    n_blast = rng.binomial(n, fraction)
    comp = rng.choice(len(patient.weights), size=n - n_blast, p=patient.weights)
    healthy = rng.normal(patient.means[comp], patient.sds[comp])
    blasts = rng.normal(patient.blast_mean, patient.blast_sd, size=(n_blast, len(patient.blast_mean)))
    values = np.vstack([healthy, blasts])
    labels = np.concatenate([np.zeros(n - n_blast, bool), np.ones(n_blast, bool)])
    order = rng.permutation(n)
    return np.clip(values[order], 0.0, 1.0), labels[order]


def _finish(values: np.ndarray, standardize: bool) -> np.ndarray:
    if not standardize:
        return values
    sd = values.std(axis=0)
    return (values - values.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def _log_uniform(rng, lo, hi) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def gen_corpus(spec: SynthSpec | dict | None = None) -> SynthCorpus:
    """Target corpus (labelled, one fixed panel per patient) plus a pre-training
    corpus of blast-free and blast-dominant samples with random panels."""
    if spec is None:
        spec = SynthSpec()
    elif isinstance(spec, dict):
        spec = SynthSpec.parse(spec)
    names = marker_names(spec.n_markers)
    registry = FeatureRegistry(names)
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    world = _World(spec, np.random.default_rng(seeds[0]))

    rng = np.random.default_rng(seeds[1])
    patients, target = [], []
    width = len(str(spec.patients))
    for p, count in enumerate(spec.counts()):
        patient = world.patient(f"P{p + 1:0{width}d}", rng)
        patients.append(patient)
        for s in range(count):
            n = int(rng.integers(spec.events_min, spec.events_max + 1))
            fraction = spec.mrd_fraction or _log_uniform(rng, spec.mrd_min, spec.mrd_max)
            values, labels = _draw_events(patient, n, fraction, rng)
            target.append(Sample(
                panel=patient.panel, events=_finish(values[:, patient.panel], spec.standardize), labels=labels,
                patient_id=patient.patient_id, sample_id=f"{patient.patient_id}-S{s + 1}",
                meta={"dataset": "target"},
            ))

    rng = np.random.default_rng(seeds[2])
    pretrain = []
    kinds = ["control"] * spec.control_samples + ["diagnosis"] * spec.diagnosis_samples
    for i, kind in enumerate(kinds):
        patient = world.patient(f"PRE{i + 1:03d}", rng)
        n = int(rng.integers(spec.events_min, spec.events_max + 1))
        if kind == "control":
            values, labels = _draw_events(patient, n, 0.0, rng)
        else:
            values, labels = _draw_events(
                patient, n, rng.uniform(spec.diagnosis_min, spec.diagnosis_max), rng)
        pretrain.append(Sample(
            panel=patient.panel, events=_finish(values[:, patient.panel], spec.standardize), labels=labels,
            patient_id=patient.patient_id, sample_id=f"{kind.upper()}-{i + 1:03d}",
            meta={"dataset": kind},
        ))
    return SynthCorpus(target, pretrain, registry, patients)


def corpus_report(samples: list[Sample], registry: FeatureRegistry | None = None) -> dict:
    """Per-sample sizes and blast fractions plus a feature-occurrence table."""
    rows = []
    occurrence: Counter = Counter()
    for s in samples:
        names = [registry.names[i] if registry else str(i) for i in s.panel]
        occurrence.update(names)
        rows.append({
            "sample_id": s.sample_id,
            "patient_id": s.patient_id,
            "events": s.n_events,
            "panel_size": s.n_features,
            "blast_fraction": None if s.labels is None else float(s.labels.mean()),
        })
    return {"samples": rows, "feature_occurrence": dict(sorted(occurrence.items()))}


def write_corpus(corpus: SynthCorpus, out: str | Path, spec: SynthSpec | None = None) -> dict[str, Path]:
    """Write CSV + label files, one manifest per corpus, and the registry."""
    out = Path(out)
    written = {}
    for name, samples in (("target", corpus.target), ("pretrain", corpus.pretrain)):
        folder = out / name
        folder.mkdir(parents=True, exist_ok=True)
        entries = []
        for s in samples:
            header = ",".join(corpus.registry.names[i] for i in s.panel)
            np.savetxt(folder / f"{s.sample_id}.csv", s.events, fmt="%.8f", delimiter=",",
                       header=header, comments="")
            (folder / f"{s.sample_id}.labels").write_text(
                "\n".join("1" if v else "0" for v in s.labels) + "\n")
            entries.append({"sample_id": s.sample_id, "patient_id": s.patient_id,
                            "path": f"{s.sample_id}.csv", "labels": f"{s.sample_id}.labels",
                            "dataset": s.meta.get("dataset", name)})
        manifest = folder / "manifest.json"
        manifest.write_text(json.dumps({"transform": "identity", "samples": entries}, indent=2))
        written[f"{name}_manifest"] = manifest
    registry = out / "registry.json"
    registry.write_text(corpus.registry.to_json())
    written["registry"] = registry
    if spec is not None:
        (out / "spec.json").write_text(json.dumps(spec.model_dump(), indent=2))
        written["spec"] = out / "spec.json"
    report = out / "corpus_report.json"
    report.write_text(json.dumps(
        {"target": corpus_report(corpus.target, corpus.registry),
         "pretrain": corpus_report(corpus.pretrain, corpus.registry)}, indent=2))
    written["report"] = report
    return written
