from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint, state_hash
from .cv import CvSplit, TooFewPatients, patient_cv
from .masking import TooFewFeatures, batch_masks, make_mask, make_masks, masked_count
from .metrics import MissingLabels, SampleMetrics, mean_metrics, mean_std, sample_metrics
from .optim import AdamW, adamw_update, cosine_lr
from .pipeline import (
    ConfigInvalid,
    PhaseResult,
    PipelineResult,
    TrainConfig,
    TrainingDiverged,
    resolve_phases,
    run_pipeline,
    train_phase,
)
from .steps import bce_loss, evaluate, mae_loss, mae_step, masked_l1, supervised_loss, supervised_step
