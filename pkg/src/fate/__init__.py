"""Feature-agnostic set-transformer encoder for cytometry samples with
heterogeneous feature panels, with masked-autoencoder pre-training."""

from .data import Batch, Sample, collate
from .model import BaselineConfig, BaselineST, FateConfig, FateModel, build_model
from .registry import FeatureRegistry, canonicalize

__version__ = "0.1.0"
