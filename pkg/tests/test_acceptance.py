"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary. The two training criteria share one cached pre-training arm
and take roughly half an hour on one CPU core.
"""

import math
import statistics
import time

import numpy as np
import pytest
import torch

from fate.data import Sample, collate, fixed_subsample
from fate.fcs_io import FcsError, parse_fcs
from fate.model import FateConfig, build_model, predict_logits
from fate.registry import FeatureRegistry
from fate.synth import SynthSpec, gen_corpus
from fate.training import (
    SampleMetrics,
    TrainConfig,
    adamw_update,
    cosine_lr,
    evaluate,
    load_checkpoint,
    mae_loss,
    make_masks,
    masked_l1,
    batch_masks,
    patient_cv,
    run_pipeline,
    sample_metrics,
)

from fcs_writer import write_fcs

RESULTS: list[str] = []

# training budget for the directional criteria (one CPU core)
FINETUNE = dict(epochs=50, patience=50, batch_size=4, event_cap=256, val_event_cap=256)
PRETRAIN = dict(epochs=75, batch_size=8, event_cap=256)
SEEDS = [0, 1, 2]


def report(name: str, ok: bool, detail: str, soft: bool = False) -> None:
    tag = "PASS" if ok else ("FAIL (soft)" if soft else "FAIL")
    line = f"{tag:<11} {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    if not ok:
        if soft:
            pytest.xfail(line)
        pytest.fail(line)


def random_sample(rng, M=12, n=None, F=None):
    F = F or int(rng.integers(1, M + 1))
    n = n or int(rng.integers(5, 200))
    return Sample(panel=rng.permutation(M)[:F], events=rng.normal(size=(n, F)),
                  labels=rng.random(n) < 0.2)


# --- model properties ------------------------------------------------------------


def test_gradient_correctness():
    d = torch.float64
    torch.manual_seed(0)
    cfg = FateConfig(n_features=3, d_enc=4, d_hidden=8, f_c=4, induced_points=2, heads=2,
                     encoder_layers=1, decoder_layers=1)
    model = build_model(cfg).to(d)
    rng = np.random.default_rng(5)
    s = Sample(panel=np.array([0, 1, 2]), events=rng.normal(size=(3, 3)),
               labels=np.array([True, False, True]))
    batch = collate([s], dtype=d)
    mix = torch.randn(1, 3, 3, dtype=d)
    params = list(model.parameters())

    def loss():
        return model(batch).sum() + (model.reconstruct(batch) * mix).sum()

    start = time.perf_counter()
    # the decoder cross-attention sees a single key, so its query/key maps have
    # zero gradient; the finite differences check those zeros as well
    grads = [torch.zeros_like(p) if g is None else g
             for p, g in zip(params, torch.autograd.grad(loss(), params, allow_unused=True))]
    eps, worst, count = 1e-5, 0.0, 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                num = (up - down) / (2 * eps)
                worst = max(worst, abs(num - gflat[i].item()) / max(1.0, abs(num)))
                count += 1
    took = time.perf_counter() - start
    report("gradient correctness", worst < 1e-4 and took < 60,
           f"{count} parameters, max rel error {worst:.2e} (< 1e-4), {took:.1f} s (< 60 s)")


def test_feature_order_invariance():
    torch.manual_seed(1)
    model = build_model(FateConfig()).eval()
    rng = np.random.default_rng(1)
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            s = random_sample(rng)
            base = predict_logits(model, s)
            shuffled = predict_logits(model, s.permute_features(rng.permutation(s.n_features)))
            worst = max(worst, np.abs(shuffled - base).max())
    report("feature-order invariance", worst < 1e-5,
           f"100 samples, max logit delta {worst:.2e} (< 1e-5, float32)")


def test_event_order_equivariance():
    torch.manual_seed(2)
    model = build_model(FateConfig()).eval()
    rng = np.random.default_rng(2)
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            s = random_sample(rng)
            p = rng.permutation(s.n_events)
            base = predict_logits(model, s)
            worst = max(worst, np.abs(predict_logits(model, s.subset(p)) - base[p]).max())
    report("event-order equivariance", worst < 1e-6,
           f"100 samples, max deviation {worst:.2e} (< 1e-6, float32)")


def test_feature_count_agnosticism(tmp_path):
    from fate.training import save_checkpoint

    torch.manual_seed(3)
    M = 12
    reg = FeatureRegistry([f"F{i}" for i in range(M)]).freeze()
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(FateConfig(n_features=M)), reg, {})
    model = load_checkpoint(path).model.eval()
    rng = np.random.default_rng(3)
    runs, finite = 0, True
    with torch.no_grad():
        for F in range(1, M + 1):
            for n in (1, 2, 1000):
                s = random_sample(rng, M, n=n, F=F)
                out = predict_logits(model, s)
                finite &= out.shape == (n,) and bool(np.isfinite(out).all())
                runs += 1
    report("feature-count agnosticism", finite,
           f"{runs} samples with F in 1..{M} and n in {{1, 2, 1000}}, all outputs finite")


# --- masking -------------------------------------------------------------------------


def test_masking_contract():
    rng = np.random.default_rng(4)
    counts_ok, worst_freq, total = True, 0.0, 0
    for F in (2, 3, 5, 8, 12):
        for r in (0.25, 0.5, 0.75):
            k = min(max(math.floor(F * r + 0.5), 1), F - 1)
            masks = make_masks(100_000, F, r, rng)
            counts_ok &= bool((masks.sum(1) == k).all())
            worst_freq = max(worst_freq, np.abs(masks.mean(0) - k / F).max())
            total += len(masks)

    torch.manual_seed(4)
    model = build_model(FateConfig(n_features=12)).double()
    samples = [random_sample(rng, n=40) for _ in range(4)]
    samples = [s if s.n_features > 1 else random_sample(rng, n=40, F=3) for s in samples]
    batch = collate(samples, dtype=torch.float64)
    hidden = batch_masks(batch, 0.25, rng)
    with torch.no_grad():
        pred = model.reconstruct(batch, visible=~hidden)
        base = masked_l1(pred, batch.values, hidden)
        noisy = torch.where(hidden, pred, pred + 100 * torch.randn_like(pred))
        same = masked_l1(noisy, batch.values, hidden).item() == base.item()
        same &= mae_loss(batch, model, 0.25, None, hidden=hidden).item() == base.item()
    ok = counts_ok and worst_freq < 0.02 and same
    report("masking contract", ok,
           f"{total} masks, counts exact={counts_ok}, max positional deviation {worst_freq:.4f} "
           f"(< 0.02), unmasked perturbation leaves loss unchanged={same}")


# --- training on the synthetic corpus ---------------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    c = gen_corpus(SynthSpec())
    c.registry.freeze()
    return c


def _arm(corpus, phases):
    start = time.perf_counter()
    cfg = FateConfig(n_features=corpus.registry.M)
    res = run_pipeline(cfg, phases, corpus.registry, corpus.target, corpus.pretrain, seeds=SEEDS)
    f1 = [run["mean"]["f1"] for run in res.report["runs"]]
    return f1, time.perf_counter() - start


_CACHE: dict = {}


def _mae_arm(corpus, ratio):
    if ratio not in _CACHE:
        _CACHE[ratio] = _arm(corpus, [
            TrainConfig(phase="mae_pretrain", mask_ratio=ratio, **PRETRAIN),
            TrainConfig(phase="finetune", **FINETUNE),
        ])
    return _CACHE[ratio]


def test_directional_pretraining_gain(corpus):
    scratch, t_scratch = _arm(corpus, [TrainConfig(phase="scratch", **FINETUNE)])
    mae, t_mae = _mae_arm(corpus, 0.25)
    gains = [a - b for a, b in zip(mae, scratch)]
    gain = statistics.median(gains)
    took = t_scratch + t_mae
    report("pre-training gain", gain >= 0.05 and took < 1800,
           f"F1 scratch {fmt(scratch)} vs pre-train+fine-tune {fmt(mae)}, "
           f"median gain {gain:+.3f} (>= 0.05), {took / 60:.1f} min (< 30 min)")


def test_masking_ratio_ordering(corpus):
    f1 = {r: statistics.median(_mae_arm(corpus, r)[0]) for r in (0.25, 0.5, 0.75)}
    ok = f1[0.25] >= f1[0.5] - 0.02 and f1[0.5] >= f1[0.75] - 0.02
    report("masking-ratio ordering", ok,
           "median F1 " + ", ".join(f"r={r}: {v:.3f}" for r, v in f1.items()) + " (0.02 slack)",
           soft=True)


def fmt(values):
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


# --- metrics, cross-validation, parser, optimiser, checkpoints ---------------------------------


def test_metrics():
    cases = [
        (SampleMetrics.from_counts(2, 1, 1).f1, 2 / 3),
        (SampleMetrics.from_counts(2, 1, 1).p, 2 / 3),
        (SampleMetrics.from_counts(2, 1, 1).r, 2 / 3),
        (SampleMetrics.from_counts(0, 0, 0).f1, 1.0),
        (SampleMetrics.from_counts(0, 2, 0).f1, 0.0),
        (SampleMetrics.from_counts(0, 0, 3).f1, 0.0),
        (SampleMetrics.from_counts(3, 0, 0).f1, 1.0),
        (SampleMetrics.from_counts(1, 3, 0).p, 0.25),
        (sample_metrics(np.array([1, 1, 0, 0, 1]), np.array([1, 0, 1, 0, 1])).f1, 2 / 3),
        (sample_metrics(np.zeros(4, bool), np.zeros(4, bool)).f1, 1.0),
    ]
    bad = [i for i, (got, want) in enumerate(cases) if got != want]
    report("metrics", not bad, f"{len(cases)} hand cases, exact mismatches: {bad or 'none'}")


def test_patient_cv_roster():
    roster = dict(A=1, B=5, C=10, D=4, E=5, F=11, G=18, H=2, I=2, J=9, K=2, L=2)
    samples = [Sample(panel=[0], events=[[0.0]], patient_id=p, sample_id=f"{p}{i}")
               for p, n in roster.items() for i in range(n)]
    patient = {s.sample_id: s.patient_id for s in samples}
    splits = patient_cv(samples, 0.2, np.random.default_rng(0))
    counts_ok = {sp.held_out_patient: len(sp.test) for sp in splits} == roster
    leaks = 0
    for sp in splits:
        groups = [{patient[x] for x in part} for part in (sp.train, sp.val, sp.test)]
        leaks += len(groups[0] & groups[1]) + len(groups[0] & groups[2]) + len(groups[1] & groups[2])
    report("patient cross-validation", len(splits) == 12 and counts_ok and leaks == 0,
           f"{len(samples)} samples, {len(splits)} splits, test counts match={counts_ok}, "
           f"leaked patients {leaks}")


def test_fcs_parser():
    rng = np.random.default_rng(6)
    exact, files = True, 0
    for version in ("FCS3.0", "FCS3.1"):
        for order in ("1,2,3,4", "4,3,2,1"):
            rows = rng.normal(0, 1000, size=(23, 4)).astype(np.float32)
            _, _, m = parse_fcs(write_fcs(rows.tolist(), list("ABCD"), version=version, byteorder=order))
            exact &= np.array_equal(m.values.astype(np.float32).view(np.uint32), rows.view(np.uint32))
            for bits in (8, 16, 32, 64):
                ints = rng.integers(0, min(2**bits - 1, 2**53), size=(11, 3), dtype=np.uint64)
                _, _, m = parse_fcs(write_fcs(ints.tolist(), list("XYZ"), version=version,
                                              datatype="I", byteorder=order, bits=[bits] * 3,
                                              ranges=[2**bits] * 3))
                exact &= np.array_equal(m.values, ints.astype(np.float64))
                files += 1
            files += 1

    seeds = [write_fcs(rng.normal(size=(6, 3)).tolist(), ["a", "b", "c"]),
             write_fcs(rng.integers(0, 999, (5, 2)).tolist(), ["a", "b"], datatype="I",
                       bits=[16, 32], byteorder="4,3,2,1", version="FCS3.0")]
    structured, crashes = 0, []
    for trial in range(10_000):
        buf = bytearray(seeds[trial % 2])
        kind = trial % 3
        if kind == 0:
            for _ in range(rng.integers(1, 6)):
                buf[rng.integers(len(buf))] = rng.integers(256)
        elif kind == 1:
            buf = buf[: rng.integers(len(buf))]
        else:
            pos = rng.integers(len(buf))
            buf[pos:pos] = bytes(rng.integers(0, 256, rng.integers(1, 9)).tolist())
        try:
            parse_fcs(bytes(buf))
        except FcsError:
            structured += 1
        except Exception as exc:  # anything else is a crash
            crashes.append(type(exc).__name__)
    report("FCS parser", exact and not crashes,
           f"{files} crafted files bit-exact={exact}; 10000 mutations, {structured} structured "
           f"errors, {len(crashes)} crashes")


def test_scheduler_and_optimizer():
    lr = [cosine_lr(t, 0.001, 0.0002, 10) for t in (0, 5, 10)]
    sched_ok = lr[0] == 0.001 and abs(lr[1] - 0.0006) < 1e-15 and abs(lr[2] - 0.0002) < 1e-15
    # one AdamW step by hand: m = 0.1 g, v = 0.001 g^2, bias-corrected ratio g / (|g| + eps)
    p, g, lr_, wd, eps = 0.5, -2.0, 0.01, 0.01, 1e-8
    want = p - lr_ * wd * p - lr_ * g / (abs(g) + eps)
    got, _, _ = adamw_update(p, g, 0.0, 0.0, step=1, lr=lr_, weight_decay=wd)
    err = abs(got - want)
    report("scheduler and optimizer", sched_ok and err < 1e-12,
           f"cosine lr at t=0/5/10 = {lr[0]:g}/{lr[1]:g}/{lr[2]:g}; AdamW step error {err:.1e} (< 1e-12)")


def test_checkpoint_round_trip(tmp_path):
    spec = {"patients": 3, "samples_per_patient": 2, "events_min": 100, "events_max": 200,
            "mrd_min": 0.1, "mrd_max": 0.3, "control_samples": 2, "diagnosis_samples": 2}
    c = gen_corpus(spec)
    c.registry.freeze()
    cfg = FateConfig(n_features=c.registry.M, d_enc=4, d_hidden=16, f_c=8, induced_points=4,
                     heads=2, encoder_layers=1, decoder_layers=1)
    phases = [TrainConfig(phase="scratch", epochs=3, batch_size=2, event_cap=64, val_event_cap=48)]
    res = run_pipeline(cfg, phases, c.registry, c.target, c.pretrain, seeds=[0], out_dir=tmp_path)
    by_id = {s.sample_id: s for s in c.target}
    worst = 0.0
    for split in res.report["runs"][0]["splits"]:
        ckpt = load_checkpoint(tmp_path / "seed_0" / f"split_{split['held_out_patient']}.ckpt")
        val = [fixed_subsample(by_id[x], 48) for x in ckpt.meta["split"]["val"]]
        worst = max(worst, abs(evaluate(val, ckpt.model)[1]["f1"] - split["val_f1"]))
    report("checkpoint round-trip", worst < 1e-6,
           f"{len(res.report['runs'][0]['splits'])} checkpoints, max val F1 deviation {worst:.1e} (< 1e-6)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
