"""Training phases and the patient cross-validation pipeline."""

from __future__ import annotations

import copy
import json
import logging
import math
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator

from ..data import Sample, collate, fixed_subsample
from ..model import BaselineConfig, FateConfig, FateModel, build_model
from ..registry import FeatureRegistry
from .checkpoint import save_checkpoint
from .cv import CvSplit, patient_cv
from .metrics import mean_metrics, mean_std
from .optim import AdamW, cosine_lr
from .steps import evaluate, mae_step, supervised_step

log = logging.getLogger(__name__)

Phase = Literal["mae_pretrain", "sup_pretrain", "finetune", "scratch"]
PRE_PHASES = ("mae_pretrain", "sup_pretrain")
CV_PHASES = ("finetune", "scratch")

PHASE_DEFAULTS = {
    "scratch": dict(epochs=400, patience=300, batch_size=8, lr_min=2e-4, t_max=10),
    "sup_pretrain": dict(epochs=1500, patience=0, batch_size=32, lr_min=2e-5, t_max=100),
    "finetune": dict(epochs=100, patience=0, batch_size=8, lr_min=2e-4, t_max=10),
    "mae_pretrain": dict(epochs=2000, patience=0, batch_size=32, lr_min=2e-5, t_max=100),
}
FINETUNE_AFTER_MAE = dict(epochs=300, patience=200)


class ConfigInvalid(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class TrainConfig(BaseModel):
    """One training phase. Unset fields take the phase defaults; ``patience=0``
    disables early stopping."""

    model_config = ConfigDict(extra="forbid")

    phase: Phase
    epochs: int | None = None
    patience: int | None = None
    batch_size: int | None = None
    lr_start: float = 1e-3
    lr_min: float | None = None
    t_max: int | None = None
    weight_decay: float = 0.01
    mask_ratio: float = 0.25
    event_cap: int | None = 10_000
    val_event_cap: int | None = None
    grad_clip: float | None = None
    threshold: float = 0.5

    @model_validator(mode="after")
    def _check(self):
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        for name in ("epochs", "batch_size", "t_max", "event_cap", "val_event_cap"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be at least 1")
        return self

    def resolved(self, after_mae: bool = False) -> TrainConfig:
        defaults = dict(PHASE_DEFAULTS[self.phase])
        if self.phase == "finetune" and after_mae:
            defaults.update(FINETUNE_AFTER_MAE)
        filled = {k: v for k, v in defaults.items() if getattr(self, k) is None}
        return self.model_copy(update=filled)


def resolve_phases(phases: list[TrainConfig]) -> list[TrainConfig]:
    if not phases:
        raise ConfigInvalid("the phase list is empty")
    names = [p.phase for p in phases]
    cv = [i for i, n in enumerate(names) if n in CV_PHASES]
    if len(cv) > 1 or (cv and cv[0] != len(names) - 1):
        raise ConfigInvalid(f"at most one finetune/scratch phase, and it must come last: {names}")
    if "scratch" in names and len(names) > 1:
        raise ConfigInvalid("scratch training cannot follow pre-training phases")
    out, seen_mae = [], False
    for p in phases:
        out.append(p.resolved(after_mae=seen_mae))
        seen_mae |= p.phase == "mae_pretrain"
    return out


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def phase_parameters(model: torch.nn.Module, phase: str) -> list[torch.nn.Parameter]:
    """Parameters a phase updates: the head sits out MAE, the decoder sits out supervision."""
    if not isinstance(model, FateModel):
        if phase == "mae_pretrain":
            raise ConfigInvalid("masked-autoencoder pre-training needs the FATE model")
        return list(model.parameters())
    skip = "head." if phase == "mae_pretrain" else "decoder."
    return [p for name, p in model.named_parameters() if not name.startswith(skip)]


@dataclass
class PhaseResult:
    phase: str
    epochs_run: int
    best_epoch: int
    best_val_f1: float | None
    history: list[dict] = field(default_factory=list)


def train_phase(
    model: torch.nn.Module,
    cfg: TrainConfig,
    train: list[Sample],
    val: list[Sample] | None = None,
    seed: int = 0,
    on_epoch: Callable[[dict], None] | None = None,
    dtype: torch.dtype = torch.float32,
    tags: dict | None = None,
) -> PhaseResult:
    """Run one phase in place on ``model``.

    Finetune and scratch phases track validation F1 every epoch and restore
    the best state at the end; ties keep the earlier epoch.
    """
    cfg = cfg.resolved()
    if not train:
        raise ConfigInvalid(f"phase {cfg.phase} has no training samples")
    if cfg.phase == "sup_pretrain" or cfg.phase in CV_PHASES:
        unlabeled = [s.sample_id for s in train if s.labels is None]
        if unlabeled:
            raise ConfigInvalid(f"phase {cfg.phase} needs labels; missing for {unlabeled[:3]}")
    rng = np.random.default_rng(seed)
    train = [model.prepare(s) for s in train]
    model.train()
    opt = AdamW(phase_parameters(model, cfg.phase), lr=cfg.lr_start,
                weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    track = bool(val) and cfg.phase in CV_PHASES
    if track:
        val = [fixed_subsample(s, cfg.val_event_cap) for s in val]
    best_state, best_f1, best_epoch, stale = None, -math.inf, -1, 0
    history = []
    epoch = -1
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(epoch, cfg.lr_start, cfg.lr_min, cfg.t_max)
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), cfg.batch_size):
            chunk = [train[i] for i in order[start : start + cfg.batch_size]]
            batch = collate(chunk, dtype=dtype, event_cap=cfg.event_cap, rng=rng)
            opt.zero_grad()
            if cfg.phase == "mae_pretrain":
                loss = mae_step(batch, model, cfg.mask_ratio, rng)
            else:
                loss = supervised_step(batch, model)
            value = loss.detach().item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"{cfg.phase} loss became {value} at epoch {epoch}")
            opt.step()
            losses.append(value)
        record = {"epoch": epoch, "phase": cfg.phase, "train_loss": float(np.mean(losses)),
                  "val_f1": None, "lr": opt.lr, **(tags or {})}
        if track:
            _, agg = evaluate(val, model, cfg.threshold)
            record["val_f1"] = agg["f1"]
            if agg["f1"] > best_f1:
                best_f1, best_epoch, stale = agg["f1"], epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
        history.append(record)
        if on_epoch:
            on_epoch(record)
        if track and cfg.patience and stale >= cfg.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = epoch
    model.eval()
    return PhaseResult(cfg.phase, epoch + 1, best_epoch,
                       best_f1 if best_state is not None else None, history)


# --- pipeline ---------------------------------------------------------------


@dataclass
class SplitTask:
    seed: int
    index: int
    split: CvSplit
    model_cfg: dict
    init_state: dict | None
    cfg: TrainConfig
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    threads: int


@dataclass
class SplitOutcome:
    seed: int
    held_out: str
    state: dict
    result: PhaseResult
    test_metrics: list


def _config_of(doc: dict):
    return BaselineConfig.model_validate(doc) if doc.get("kind") == "baseline" \
        else FateConfig.model_validate(doc)


def _run_split(task: SplitTask) -> SplitOutcome:
    torch.set_num_threads(task.threads)
    torch.manual_seed(derive_seed(task.seed, task.index, 1))
    model = build_model(_config_of(task.model_cfg))
    if task.init_state is not None:
        model.load_state_dict(task.init_state)
    tags = {"seed": task.seed, "split": task.split.held_out_patient}
    result = train_phase(model, task.cfg, task.train, task.val,
                         seed=derive_seed(task.seed, task.index, 2), tags=tags)
    per_sample, _ = evaluate(task.test, model, task.cfg.threshold)
    return SplitOutcome(task.seed, task.split.held_out_patient,
                        copy.deepcopy(model.state_dict()), result, per_sample)


@dataclass
class PipelineResult:
    report: dict
    checkpoints: list[Path]
    log: list[dict]


def run_pipeline(
    model_cfg: FateConfig | BaselineConfig,
    phases: list[TrainConfig],
    registry: FeatureRegistry,
    target: list[Sample],
    pretrain: list[Sample] | None = None,
    seeds: list[int] = (0,),
    out_dir: str | Path | None = None,
    cv_seed: int = 0,
    val_ratio: float = 0.2,
    jobs: int = 1,
    threads: int = 1,
    on_epoch: Callable[[dict], None] | None = None,
) -> PipelineResult:
    """Run the phase list once per seed.

    Pre-training phases use ``pretrain`` (``sup_pretrain`` only its labelled
    samples). A trailing finetune/scratch phase fans out over patient splits
    of ``target``; the best-validation state of every split is evaluated on
    the held-out patient and saved.
    """
    phases = resolve_phases(list(phases))
    if not registry.frozen:
        raise ConfigInvalid("freeze the registry over all corpora before training")
    torch.set_num_threads(threads)
    out = Path(out_dir) if out_dir is not None else None
    pretrain = list(pretrain or [])
    records: list[dict] = []

    def emit(record: dict) -> None:
        records.append(record)
        if on_epoch:
            on_epoch(record)

    pre = [p for p in phases if p.phase in PRE_PHASES]
    cv_phase = next((p for p in phases if p.phase in CV_PHASES), None)
    splits = patient_cv(target, val_ratio, np.random.default_rng(cv_seed)) if cv_phase else []
    by_id = {s.sample_id: s for s in target}
    phase_names = [p.phase for p in phases]
    checkpoints: list[Path] = []
    runs = []
    for seed in seeds:
        torch.manual_seed(derive_seed(seed, 0, 0))
        model = build_model(model_cfg)
        for k, p in enumerate(pre):
            data = pretrain if p.phase == "mae_pretrain" else [s for s in pretrain if s.labels is not None]
            train_phase(model, p, data, seed=derive_seed(seed, 100 + k), on_epoch=emit,
                        tags={"seed": seed, "split": None})
        if pre and out is not None:
            checkpoints.append(save_checkpoint(
                out / f"seed_{seed}" / "pretrained.ckpt", model, registry,
                {"phases": [p.phase for p in pre], "seed": seed,
                 "train": [p.model_dump() for p in pre]}))
        run = {"seed": seed, "splits": [], "samples": []}
        if cv_phase is None:
            runs.append(run)
            continue
        init = copy.deepcopy(model.state_dict()) if cv_phase.phase == "finetune" else None
        tasks = [
            SplitTask(seed, i, sp, model_cfg.model_dump(), init, cv_phase,
                      [by_id[x] for x in sp.train], [by_id[x] for x in sp.val],
                      [by_id[x] for x in sp.test], threads)
            for i, sp in enumerate(splits)
        ]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(_run_split, tasks))
        else:
            outcomes = [_run_split(t) for t in tasks]
        for task, oc in zip(tasks, outcomes):
            for record in oc.result.history:
                emit(record)
            split_doc = {
                "held_out_patient": oc.held_out,
                "best_epoch": oc.result.best_epoch,
                "val_f1": oc.result.best_val_f1,
                "train": task.split.train,
                "val": task.split.val,
                "test": task.split.test,
                "test_metrics": [m.to_dict() for m in oc.test_metrics],
            }
            run["splits"].append(split_doc)
            run["samples"].extend(oc.test_metrics)
            if out is not None:
                model.load_state_dict(oc.state)
                checkpoints.append(save_checkpoint(
                    out / f"seed_{seed}" / f"split_{oc.held_out}.ckpt", model, registry,
                    {"phases": phase_names, "seed": seed, "split": split_doc,
                     "train": [p.model_dump() for p in phases]}))
        run["mean"] = mean_metrics(run.pop("samples"))
        runs.append(run)
    report = build_report(runs, phase_names, model_cfg)
    if out is not None:
        write_outputs(out, report, records)
    return PipelineResult(report, checkpoints, records)


def build_report(runs: list[dict], phases: list[str], model_cfg) -> dict:
    report = {"phases": phases, "model": model_cfg.model_dump(), "runs": runs}
    means = [r["mean"] for r in runs if "mean" in r]
    if means:
        report["aggregate"] = {k: mean_std([m[k] for m in means]) for k in ("p", "r", "f1")}
    return report


def write_outputs(out: Path, report: dict, records: list[dict]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2))
    with open(out / "training_log.jsonl", "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
