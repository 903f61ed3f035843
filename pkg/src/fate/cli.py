"""Command-line entry point: ``fate {parse-fcs,gen-synth,train,evaluate,embed}``.

Anything that affects results lives in a JSON config; flags only pick paths,
parallelism and verbosity. Exit codes: 0 success, 2 usage/config/data
error, 3 training failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from . import fcs_io
from .data import SampleError, fixed_subsample
from .model import (
    BaselineConfig,
    FateConfig,
    PanelMismatch,
    PanelOutOfRange,
    config_from_dict,
    embed_sample,
)
from .registry import FeatureRegistry, RegistryError
from .synth import SpecInvalid, SynthSpec, gen_corpus, write_corpus
from .training import (
    CheckpointError,
    ConfigInvalid,
    MissingLabels,
    TooFewFeatures,
    TooFewPatients,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    run_pipeline,
)

log = logging.getLogger("fate")

EXIT_OK, EXIT_USAGE, EXIT_TRAINING = 0, 2, 3
DATA_ERRORS = (
    fcs_io.FcsError, fcs_io.CsvError, fcs_io.ManifestError, RegistryError, SpecInvalid,
    ConfigInvalid, ValidationError, CheckpointError, SampleError, PanelMismatch,
    PanelOutOfRange, MissingLabels, TooFewPatients, TooFewFeatures, OSError,
    json.JSONDecodeError, ValueError,
)


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    target: str
    pretrain: list[str] = []
    registry: str | None = None
    aliases: dict[str, str] = {}
    transform: str | dict | None = None


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    threshold: float = 0.5
    figures: bool = True


class CvSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    val_ratio: float = 0.2
    seed: int = 0


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataSection
    model: dict = {}
    train: list[TrainConfig]
    eval: EvalSection = EvalSection()
    cv: CvSection = CvSection()
    seeds: list[int] = [0, 1, 2]
    threads: int = 1


def _env_seed() -> int | None:
    raw = os.environ.get("FATE_SEED")
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigInvalid(f"FATE_SEED={raw!r} is not an integer") from None


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _write_outputs_manifest(out: Path, files: list[Path]) -> None:
    rel = sorted({str(Path(f).resolve().relative_to(out.resolve())) for f in files})
    _write_json(out / "outputs.json", {"files": rel})


def _metrics_csv(path: Path, rows: list[dict]) -> Path:
    fields = ["seed", "held_out_patient", "sample_id", "tp", "fp", "fn", "p", "r", "f1"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


# --- parse-fcs --------------------------------------------------------------


def cmd_parse_fcs(args) -> int:
    path = Path(args.path)
    header, text, raw = fcs_io.read_fcs(path)
    spec = fcs_io.TransformSpec.from_config(_maybe_json(args.transform))
    matrix = fcs_io.apply_transforms(raw, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{path.stem}.csv"
    np.savetxt(csv_path, matrix.values, fmt="%.17g", delimiter=",",
               header=",".join(matrix.feature_names()), comments="")
    meta = {
        "source": str(path),
        "header": header.__dict__,
        "channels": [{"name": n, "stain": s} for n, s in matrix.channel_names],
        "events": int(matrix.values.shape[0]),
        "transform": args.transform,
        "keywords": text.keywords,
    }
    meta_path = _write_json(out / f"{path.stem}.meta.json", meta)
    _write_outputs_manifest(out, [csv_path, meta_path])
    print(f"wrote {matrix.values.shape[0]} events x {matrix.values.shape[1]} channels to {csv_path}")
    return EXIT_OK


def _maybe_json(value: str | None):
    if value is None:
        return None
    if value.endswith(".json") and Path(value).exists():
        return json.loads(Path(value).read_text())
    return value


# --- gen-synth --------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    doc = json.loads(Path(args.spec).read_text()) if args.spec else {}
    seed = _env_seed()
    if seed is not None:
        doc["seed"] = seed
    spec = SynthSpec.parse(doc)
    corpus = gen_corpus(spec)
    out = Path(args.out)
    written = write_corpus(corpus, out, spec)
    files = list(written.values())
    for name in ("target", "pretrain"):
        files += sorted((out / name).iterdir())
    _write_outputs_manifest(out, files)
    print(f"wrote {len(corpus.target)} target and {len(corpus.pretrain)} pre-training samples "
          f"from {spec.patients} patients to {out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------


def load_run_config(path: Path) -> RunConfig:
    return RunConfig.model_validate(json.loads(path.read_text()))


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _load_corpora(run: RunConfig, base: Path):
    data = run.data
    if data.registry:
        registry = FeatureRegistry.from_json(_resolve(base, data.registry).read_text()).unfreeze()
    else:
        registry = FeatureRegistry(aliases=data.aliases)
    registry.aliases.update({k.strip().upper(): v.strip().upper() for k, v in data.aliases.items()})
    transform = fcs_io.TransformSpec.from_config(data.transform) if data.transform else None
    target = fcs_io.load_manifest(_resolve(base, data.target), registry, transform)
    pretrain = []
    for m in data.pretrain:
        pretrain += fcs_io.load_manifest(_resolve(base, m), registry, transform)
    registry.freeze()
    return registry, target, pretrain


def _model_config(run: RunConfig, registry: FeatureRegistry, samples) -> FateConfig | BaselineConfig:
    doc = dict(run.model)
    doc["n_features"] = registry.M
    if doc.get("kind") == "baseline":
        mode = doc.get("mode", "intersection")
        panel = doc.get("panel")
        if not panel:
            sets = [set(s.panel.tolist()) for s in samples]
            ids = set.intersection(*sets) if mode == "intersection" else set.union(*sets)
            panel = sorted(ids)
        doc["panel"] = [registry.id_of(p) if isinstance(p, str) else int(p) for p in panel]
    return config_from_dict(doc)


def cmd_train(args) -> int:
    config_path = Path(args.config)
    run = load_run_config(config_path)
    seed = _env_seed()
    seeds = [seed] if seed is not None else run.seeds
    registry, target, pretrain = _load_corpora(run, config_path.parent)
    model_cfg = _model_config(run, registry, target + pretrain)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    archived = _write_json(out / "config.json", {**run.model_dump(), "seeds": seeds})
    reg_path = out / "registry.json"
    reg_path.write_text(registry.to_json())

    def progress(record: dict) -> None:
        log.info("%s", json.dumps(record))

    result = run_pipeline(
        model_cfg, run.train, registry, target, pretrain, seeds=seeds, out_dir=out,
        cv_seed=run.cv.seed, val_ratio=run.cv.val_ratio, jobs=args.jobs,
        threads=run.threads, on_epoch=progress,
    )
    files = [archived, reg_path, out / "metrics.json", out / "training_log.jsonl", *result.checkpoints]
    rows = [
        {"seed": r["seed"], "held_out_patient": s["held_out_patient"], **m}
        for r in result.report["runs"] for s in r["splits"] for m in s["test_metrics"]
    ]
    files.append(_metrics_csv(out / "metrics.csv", rows))
    if run.eval.figures and not args.no_figures:
        from .plotting import plot_sample_metrics, plot_training_curves

        files.append(plot_training_curves(result.log, out / "figures" / "training_curves.png"))
        if rows:
            files.append(plot_sample_metrics(
                [{**r, "sample_id": f"{r['sample_id']}/s{r['seed']}"} for r in rows],
                out / "figures" / "test_metrics.png"))
    _write_outputs_manifest(out, files)
    agg = result.report.get("aggregate")
    if agg:
        print(f"test F1 {agg['f1']['mean']:.4f} +/- {agg['f1']['std']:.4f} over {agg['f1']['n']} seed(s)")
    else:
        print(f"pre-training finished; checkpoints in {out}")
    return EXIT_OK


# --- evaluate / embed -------------------------------------------------------


def _checkpoint_samples(args):
    ckpt = load_checkpoint(args.checkpoint)
    registry = ckpt.registry.freeze()
    samples = fcs_io.load_manifest(args.data, registry)
    split = getattr(args, "split", "all")
    if split != "all":
        info = ckpt.meta.get("split")
        if not info:
            raise ConfigInvalid("this checkpoint carries no cross-validation split")
        wanted = set(info[split])
        samples = [s for s in samples if s.sample_id in wanted]
        missing = wanted - {s.sample_id for s in samples}
        if missing:
            raise ConfigInvalid(f"data lacks {len(missing)} {split} sample(s) of the checkpoint split")
        if split == "val":
            cap = (ckpt.meta.get("train") or [{}])[-1].get("val_event_cap")
            samples = [fixed_subsample(s, cap) for s in samples]
    return ckpt, samples


def cmd_evaluate(args) -> int:
    ckpt, samples = _checkpoint_samples(args)
    threshold = args.threshold
    if threshold is None:
        threshold = (ckpt.meta.get("train") or [{}])[-1].get("threshold", 0.5)
    per_sample, agg = evaluate(samples, ckpt.model, threshold)
    rows = [m.to_dict() for m in per_sample]
    report = {"checkpoint": str(args.checkpoint), "threshold": threshold, "split": args.split,
              "samples": rows, "mean": agg}
    out = Path(args.out)
    files = [_write_json(out / "metrics.json", report), _metrics_csv(out / "metrics.csv", rows)]
    if not args.no_figures and rows:
        from .plotting import plot_sample_metrics

        files.append(plot_sample_metrics(rows, out / "figures" / "sample_metrics.png"))
    _write_outputs_manifest(out, files)
    print(json.dumps(agg))
    return EXIT_OK


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.model.cfg.kind != "fate":
        raise ConfigInvalid("embeddings are only defined for the FATE model")
    samples = fcs_io.load_manifest(args.data, ckpt.registry.freeze())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    f_c = ckpt.model.cfg.f_c
    files = []
    for s in samples:
        z = embed_sample(ckpt.model, s)
        path = out / f"{s.sample_id}.embedding.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "event_index", "label", *[f"z_{k + 1}" for k in range(f_c)]])
            for i, row in enumerate(z):
                label = "" if s.labels is None else int(s.labels[i])
                writer.writerow([s.sample_id, i, label, *[f"{v:.9g}" for v in row]])
        files.append(path)
    _write_outputs_manifest(out, files)
    print(f"wrote embeddings for {len(samples)} sample(s) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fate", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse-fcs", help="decode an FCS file to CSV + metadata JSON")
    p.add_argument("path")
    p.add_argument("--out", required=True)
    p.add_argument("--transform", default="default",
                   help="default, identity, asinh, minmax, zscore, or a JSON file")
    p.set_defaults(func=cmd_parse_fcs)

    p = sub.add_parser("gen-synth", help="write a synthetic corpus")
    p.add_argument("--spec", help="JSON synthetic spec (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="run the configured phase pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel cross-validation workers")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a labelled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--threshold", type=float)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("embed", help="export per-event embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except DATA_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
