"""Temporal facial affect recognition on frame blocks.

Frame blocks are pooled (mean/max/min) and summarised by a bidirectional
LSTM, then fused into expression and valence-arousal heads trained with a
weighted multi-task loss.
"""

from .ablation import AblationTable, ablate
from .backbone import Backbone, BackboneConfig, PrecomputedExtractor, pretrain_backbone
from .data import (
    NUM_CLASSES,
    DatasetManifest,
    ExpressionLabel,
    FrameRecord,
    SyntheticConfig,
    VAAnnotation,
    VideoSequence,
    balanced_sample,
    build_blocks,
    generate_synthetic,
    load_manifest,
)
from .errors import AffexError
from .kernels import BACKEND
from .metrics import LossWeights, MetricsReport, ccc, classification_metrics, expression_score, va_score
from .model import FusionModel, ModelDims, ModelVariant, build_variant, stat_pool, temporal_features
from .predictions import PredictionTable, fuse_predictions, read_predictions, score_files, write_predictions
from .training import Checkpoint, TrainConfig, evaluate, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"
