"""Feature-agnostic set-transformer encoder, prediction head and MAE decoder.

Every event's measured values become a sequence of tokens ``[value ; E[id]]``
where ``E`` is a learned table indexed by registry feature ID. A per-event
attention stack pools the tokens into one vector (Feature-Encoder), ISAB
layers put the events of a sample in context (Set-Encoder), and a small MLP
scores each event. The decoder mirrors the encoder and can reconstruct any
requested list of features.
"""

from __future__ import annotations

import math
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, model_validator

from .data import Batch, Sample, collate
from .nn_core import ISAB, MAB, SAB, ShapeMismatch, gelu, linear


class PanelOutOfRange(IndexError):
    pass


class PanelMismatch(ValueError):
    pass


class FateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["fate"] = "fate"
    n_features: int = 12  # M, rows of the encoding table
    d_enc: int = 10
    d_hidden: int = 32
    f_c: int = 8
    encoder_layers: int = 3
    decoder_layers: int = 3
    induced_points: int = 16
    heads: int = 4
    feature_sab_depth: int = 1
    decoder_sab_depth: int = 1

    @model_validator(mode="after")
    def _check(self):
        for name in ("n_features", "d_enc", "d_hidden", "f_c", "encoder_layers",
                     "decoder_layers", "induced_points", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.feature_sab_depth < 0 or self.decoder_sab_depth < 0:
            raise ValueError("self-attention depths cannot be negative")
        if self.d_hidden % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_hidden={self.d_hidden}")
        return self


class BaselineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["baseline"] = "baseline"
    n_features: int = 12  # registry size, for ID validation
    panel: list[int] = []  # fixed input panel as registry IDs
    mode: Literal["intersection", "union"] = "intersection"
    d_hidden: int = 32
    layers: int = 4
    induced_points: int = 16
    heads: int = 4

    @model_validator(mode="after")
    def _check(self):
        if self.d_hidden % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_hidden={self.d_hidden}")
        if any(i < 0 or i >= self.n_features for i in self.panel):
            raise ValueError("baseline panel refers to IDs outside the registry")
        return self


class FeatureEncodingTable(nn.Module):
    """Learned ``M x D_E`` matrix; row ``j`` encodes registry feature ``j``."""

    def __init__(self, n_features: int, d_enc: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_features, d_enc))

    @property
    def M(self) -> int:
        return self.weight.shape[0]

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.max()) >= self.M or int(ids.min()) < 0):
            raise PanelOutOfRange(f"feature ID out of range for a table of {self.M} rows")
        return self.weight[ids]

    def grow(self, n_features: int) -> None:
        """Append freshly initialised rows; existing rows are untouched."""
        extra = n_features - self.M
        if extra < 0:
            raise ValueError("the encoding table cannot shrink")
        if extra:
            new = torch.randn(extra, self.weight.shape[1], dtype=self.weight.dtype)
            self.weight = nn.Parameter(torch.cat([self.weight.data, new]))


class FeatureEncoder(nn.Module):
    def __init__(self, cfg: FateConfig):
        super().__init__()
        d = cfg.d_hidden
        self.lift = linear(1 + cfg.d_enc, d)
        self.sabs = nn.ModuleList(SAB(d, cfg.heads) for _ in range(cfg.feature_sab_depth))
        self.query = nn.Parameter(torch.randn(d) / math.sqrt(d))
        self.pool = MAB(d, cfg.heads)

    def forward(self, tokens: torch.Tensor, token_mask: torch.Tensor | None = None) -> torch.Tensor:
        """``tokens`` is ``(..., F, 1 + D_E)``; returns ``(..., d_hidden)``."""
        if tokens.shape[-1] != self.lift.in_features:
            raise ShapeMismatch(
                f"token width {tokens.shape[-1]} differs from {self.lift.in_features}"
            )
        h = self.lift(tokens)
        for sab in self.sabs:
            h = sab(h, token_mask)
        q = self.query.expand(*h.shape[:-2], 1, h.shape[-1])
        return self.pool(q, h, token_mask)[..., 0, :]


class SetEncoder(nn.Module):
    def __init__(self, cfg: FateConfig):
        super().__init__()
        self.isabs = nn.ModuleList(
            ISAB(cfg.d_hidden, cfg.heads, cfg.induced_points) for _ in range(cfg.encoder_layers)
        )
        self.out = linear(cfg.d_hidden, cfg.f_c)

    def forward(self, z: torch.Tensor, event_mask: torch.Tensor | None = None) -> torch.Tensor:
        for layer in self.isabs:
            z = layer(z, event_mask)
        return self.out(z)


class PredictionHead(nn.Module):
    """Linear, GELU, linear to one logit per row."""

    def __init__(self, d_in: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d_in
        self.fc1 = linear(d_in, hidden)
        self.fc2 = linear(hidden, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(gelu(self.fc1(z)))[..., 0]


class Decoder(nn.Module):
    def __init__(self, cfg: FateConfig):
        super().__init__()
        d = cfg.d_hidden
        self.lift = linear(cfg.f_c, d)
        self.isabs = nn.ModuleList(
            ISAB(d, cfg.heads, cfg.induced_points) for _ in range(cfg.decoder_layers)
        )
        self.query_lift = linear(cfg.d_enc, d)
        self.cross = MAB(d, cfg.heads)
        self.sabs = nn.ModuleList(SAB(d, cfg.heads) for _ in range(cfg.decoder_sab_depth))
        self.out = linear(d, 1)

    def forward(self, z, target_enc, target_mask=None, event_mask=None) -> torch.Tensor:
        """Reconstruct ``(B, n, T)`` values.

        ``z`` is ``(B, n, F_c)``, ``target_enc`` the ``(B, T, D_E)`` encoding rows
        of the requested features, ``target_mask`` ``(B, T)``.
        """
        s = self.lift(z)
        for layer in self.isabs:
            s = layer(s, event_mask)
        B, n, d = s.shape
        T = target_enc.shape[-2]
        q = self.query_lift(target_enc)[:, None].expand(B, n, T, d)
        h = self.cross(q, s[..., None, :])
        tmask = None if target_mask is None else target_mask[:, None, :].expand(B, n, T)
        for sab in self.sabs:
            h = sab(h, tmask)
        return self.out(h)[..., 0]


def _token_mask(batch: Batch, visible: torch.Tensor | None) -> torch.Tensor:
    B, n, F = batch.values.shape
    base = batch.feature_mask[:, None, :].expand(B, n, F)
    if visible is None:
        return base
    # padded events keep their full panel so no query row is left without keys
    return torch.where(batch.event_mask[..., None], base & visible, base)


class FateModel(nn.Module):
    def __init__(self, cfg: FateConfig):
        super().__init__()
        self.cfg = cfg
        self.table = FeatureEncodingTable(cfg.n_features, cfg.d_enc)
        self.feature_encoder = FeatureEncoder(cfg)
        self.set_encoder = SetEncoder(cfg)
        self.head = PredictionHead(cfg.f_c, cfg.f_c)
        self.decoder = Decoder(cfg)

    # parameter groups, used by checkpoints and phase bookkeeping
    ENCODER = ("table", "feature_encoder", "set_encoder")

    def tokens(self, batch: Batch, visible: torch.Tensor | None = None) -> torch.Tensor:
        values = batch.values
        if visible is not None:
            values = values * visible.to(values.dtype)
        enc = self.table(batch.panel).to(values.dtype)  # (B, F, D_E)
        B, n, F = values.shape
        enc = enc[:, None].expand(B, n, F, enc.shape[-1])
        return torch.cat([values[..., None], enc], dim=-1)

    def embed_events(self, batch: Batch, visible: torch.Tensor | None = None) -> torch.Tensor:
        """Feature-Encoder output, ``(B, n, d_hidden)``."""
        return self.feature_encoder(self.tokens(batch, visible), _token_mask(batch, visible))

    def encode(self, batch: Batch, visible: torch.Tensor | None = None) -> torch.Tensor:
        """Event embeddings ``(B, n, F_c)``; ``visible`` hides masked tokens."""
        return self.set_encoder(self.embed_events(batch, visible), batch.event_mask)

    def forward(self, batch: Batch) -> torch.Tensor:
        return self.head(self.encode(batch))

    def reconstruct(self, batch: Batch, visible: torch.Tensor | None = None) -> torch.Tensor:
        z = self.encode(batch, visible)
        target = self.table(batch.panel).to(z.dtype)
        return self.decoder(z, target, batch.feature_mask, batch.event_mask)

    def prepare(self, sample: Sample) -> Sample:
        if sample.panel.max() >= self.table.M:
            raise PanelOutOfRange(
                f"sample {sample.sample_id!r} uses feature ID {sample.panel.max()} "
                f"but the table has {self.table.M} rows"
            )
        return sample


class BaselineST(nn.Module):
    """Fixed-panel Set Transformer: linear lift, ISAB stack, MLP head."""

    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        if not cfg.panel:
            raise PanelMismatch("the baseline needs a non-empty fixed panel")
        self.cfg = cfg
        d = cfg.d_hidden
        self.lift = linear(len(cfg.panel), d)
        self.isabs = nn.ModuleList(
            ISAB(d, cfg.heads, cfg.induced_points) for _ in range(cfg.layers)
        )
        self.head = PredictionHead(d, d)

    def prepare(self, sample: Sample) -> Sample:
        """Reorder ``sample`` onto the fixed panel, zero-filling in union mode."""
        return Sample(
            panel=np.array(self.cfg.panel),
            events=baseline_inputs(sample, self.cfg.panel, self.cfg.mode),
            patient_id=sample.patient_id,
            sample_id=sample.sample_id,
            labels=sample.labels,
            meta=sample.meta,
        )

    def forward(self, batch: Batch) -> torch.Tensor:
        if batch.values.shape[-1] != len(self.cfg.panel):
            raise PanelMismatch("batch was not prepared for the baseline panel")
        h = self.lift(batch.values)
        for layer in self.isabs:
            h = layer(h, batch.event_mask)
        return self.head(h)


def baseline_inputs(sample: Sample, panel: list[int], mode: str) -> np.ndarray:
    position = {int(f): j for j, f in enumerate(sample.panel)}
    missing = [f for f in panel if f not in position]
    if missing and mode == "intersection":
        raise PanelMismatch(
            f"sample {sample.sample_id!r} lacks baseline features {missing}"
        )
    out = np.zeros((sample.n_events, len(panel)))
    for j, f in enumerate(panel):
        if f in position:
            out[:, j] = sample.events[:, position[f]]
    return out


def build_model(cfg: FateConfig | BaselineConfig) -> nn.Module:
    return FateModel(cfg) if cfg.kind == "fate" else BaselineST(cfg)


def config_from_dict(doc: dict) -> FateConfig | BaselineConfig:
    if doc.get("kind", "fate") == "baseline":
        return BaselineConfig.model_validate(doc)
    return FateConfig.model_validate(doc)


# --- single-sample functional surface --------------------------------------


def _as_batch(sample: Sample, dtype) -> Batch:
    return collate([sample], dtype=dtype)


def feature_tokenize(sample: Sample, table: FeatureEncodingTable, dtype=torch.float64) -> torch.Tensor:
    """Tokens ``(n, F, 1 + D_E)``: each value followed by its feature's encoding."""
    ids = torch.as_tensor(sample.panel)
    enc = table(ids).to(dtype)
    values = torch.as_tensor(sample.events, dtype=dtype)
    n, F = values.shape
    return torch.cat([values[..., None], enc[None].expand(n, F, enc.shape[-1])], dim=-1)


def feature_encode(tokens: torch.Tensor, params: FeatureEncoder, token_mask=None) -> torch.Tensor:
    return params(tokens, token_mask)


def set_encode(z: torch.Tensor, params: SetEncoder, event_mask=None) -> torch.Tensor:
    return params(z, event_mask)


def predict_head(z: torch.Tensor, params: PredictionHead) -> torch.Tensor:
    return params(z)


def decode(z: torch.Tensor, target_panel, table: FeatureEncodingTable, params: Decoder,
           event_mask=None) -> torch.Tensor:
    """Reconstruct the features in ``target_panel`` for ``(n, F_c)`` embeddings."""
    ids = torch.as_tensor(np.asarray(target_panel, dtype=np.int64))
    target = table(ids).to(z.dtype)
    mask = None if event_mask is None else torch.as_tensor(event_mask)[None]
    return params(z[None], target[None], None, mask)[0]


def baseline_forward(sample: Sample, model: BaselineST, dtype=torch.float32) -> torch.Tensor:
    return model(_as_batch(model.prepare(sample), dtype))[0]


@torch.no_grad()
def predict_logits(model: nn.Module, sample: Sample, dtype=torch.float32) -> np.ndarray:
    """Per-event logits for one full sample."""
    prepared = model.prepare(sample)
    return model(_as_batch(prepared, dtype))[0].cpu().numpy().astype(np.float64)


@torch.no_grad()
def embed_sample(model: FateModel, sample: Sample, dtype=torch.float32) -> np.ndarray:
    return model.encode(_as_batch(model.prepare(sample), dtype))[0].cpu().numpy()
