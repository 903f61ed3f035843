import json

import numpy as np
import pytest

from fate.fcs_io import TransformSpec, load_manifest
from fate.registry import FeatureRegistry
from fate.synth import SpecInvalid, SynthSpec, corpus_report, gen_corpus, write_corpus

SMALL = {"patients": 3, "events_min": 200, "events_max": 400, "control_samples": 2,
         "diagnosis_samples": 2}


def auc(x, y):
    ranks = np.argsort(np.argsort(x)) + 1.0
    pos = y.sum()
    neg = len(y) - pos
    a = (ranks[y].sum() - pos * (pos + 1) / 2) / (pos * neg)
    return max(a, 1 - a)


def test_fixed_fraction_gives_binomial_counts():
    spec = {**SMALL, "patients": 20, "samples_per_patient": 5, "events_min": 1000,
            "events_max": 1000, "mrd_fraction": 0.1, "standardize": False}
    counts = np.array([s.labels.sum() for s in gen_corpus(spec).target])
    assert len(counts) == 100
    # mean of 100 Binomial(1000, 0.1) draws: sd of the mean is 0.95
    assert abs(counts.mean() - 100) < 4
    assert 60 < counts.min() and counts.max() < 140
    assert 30 < counts.var() < 200  # binomial variance is 90


def test_patient_ids_and_counts():
    corpus = gen_corpus({**SMALL, "patients": 12, "samples_per_patient": 1})
    ids = {s.patient_id for s in corpus.target}
    assert len(ids) == 12 and len(corpus.target) == 12


def test_same_seed_bit_identical():
    a, b = gen_corpus(SMALL), gen_corpus(SMALL)
    for x, y in zip(a.target + a.pretrain, b.target + b.pretrain):
        assert np.array_equal(x.events, y.events)
        assert np.array_equal(x.labels, y.labels)
        assert np.array_equal(x.panel, y.panel)
    c = gen_corpus({**SMALL, "seed": 1})
    assert not np.array_equal(a.target[0].events, c.target[0].events)


def test_panels_keep_core_markers_and_patient_panel_is_fixed():
    spec = SynthSpec(**SMALL)
    corpus = gen_corpus(spec)
    for s in corpus.target + corpus.pretrain:
        assert set(range(spec.core_markers)) <= set(s.panel.tolist())
        assert spec.panel_min <= s.n_features <= spec.panel_max
    by_patient = {}
    for s in corpus.target:
        by_patient.setdefault(s.patient_id, set()).add(tuple(s.panel))
    assert all(len(p) == 1 for p in by_patient.values())


def test_raw_values_clipped_and_standardized_values_centred():
    raw = gen_corpus({**SMALL, "standardize": False})
    assert all(0 <= s.events.min() and s.events.max() <= 1 for s in raw.target)
    std = gen_corpus(SMALL)
    for s in std.target:
        assert np.abs(s.events.mean(axis=0)).max() < 1e-9
    # standardizing is a per-channel affine map, so labels and order carry over
    assert np.array_equal(raw.target[0].labels, std.target[0].labels)


def test_pretrain_corpus_kinds():
    corpus = gen_corpus(SMALL)
    kinds = [s.meta["dataset"] for s in corpus.pretrain]
    assert kinds == ["control"] * 2 + ["diagnosis"] * 2
    for s in corpus.pretrain:
        frac = s.labels.mean()
        assert frac == 0 if s.meta["dataset"] == "control" else 0.4 < frac < 0.95


def test_invalid_spec():
    with pytest.raises(SpecInvalid):
        SynthSpec.parse({"patients": 0})
    with pytest.raises(SpecInvalid):
        gen_corpus({"unknown": 1})
    with pytest.raises(SpecInvalid):
        gen_corpus({"mrd_min": 0.5, "mrd_max": 0.1})


@pytest.mark.parametrize("standardize", [False, True])
def test_single_marker_threshold_cannot_separate(standardize):
    corpus = gen_corpus(SynthSpec(standardize=standardize))
    for m in range(corpus.registry.M):
        xs, ys = [], []
        for s in corpus.target:
            col = np.flatnonzero(s.panel == m)
            if len(col):
                xs.append(s.events[:, col[0]])
                ys.append(s.labels)
        assert auc(np.concatenate(xs), np.concatenate(ys)) < 0.99, corpus.registry.names[m]


def test_report_rows_and_occurrence_recount():
    corpus = gen_corpus(SMALL)
    samples = corpus.target + corpus.pretrain
    report = corpus_report(samples, corpus.registry)
    assert len(report["samples"]) == len(samples)
    control = next(r for r in report["samples"] if r["sample_id"].startswith("CONTROL"))
    assert control["blast_fraction"] == 0.0
    recount = {}
    for s in samples:
        for i in s.panel:
            name = corpus.registry.names[i]
            recount[name] = recount.get(name, 0) + 1
    assert report["feature_occurrence"] == recount
    assert sum(report["feature_occurrence"].values()) == sum(s.n_features for s in samples)


def test_written_corpus_loads_back(tmp_path):
    corpus = gen_corpus(SMALL)
    paths = write_corpus(corpus, tmp_path, SynthSpec(**SMALL))
    registry = FeatureRegistry()
    loaded = load_manifest(paths["target_manifest"], registry, TransformSpec.identity())
    for a, b in zip(corpus.target, loaded):
        assert a.sample_id == b.sample_id and a.patient_id == b.patient_id
        assert np.array_equal(a.labels, b.labels)
        assert [registry.names[i] for i in b.panel] == [corpus.registry.names[i] for i in a.panel]
        assert np.abs(a.events - b.events).max() < 1e-7
    spec = json.loads(paths["spec"].read_text())
    assert spec["patients"] == 3
