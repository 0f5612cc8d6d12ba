"""Cluster-masked autoregressive and multi-task pretraining for an mLSTM
vision encoder, scaled to run end-to-end on a single CPU.

Package map:
    tensor      dense tensors, gradient tape, MALTNSR1 tensor files
    gradcheck   central-difference gradient oracle
    serialize   patch grids, cluster plans, token embedding
    masking     content masks and masking-ratio selection
    mlstm       mLSTM blocks (sequential reference + parallel form)
    model       encoder, decoder, task heads
    objectives  AR / depth / segmentation / blended losses
    optim       AdamW, warmup+cosine schedule, EMA
    checkpoint  MALCKPT1 persistence
    data        synthetic shape datasets and ingestion
    config      run configuration parsing and validation
    train       three-stage pipeline and evaluation
    cli         command-line interface
"""

from .errors import (CheckpointError, ConfigError, DataError, DimensionError,
                     GeometryError, MalError, MaskError, NumericsError,
                     OptimError, SelectionError)
from .tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "GradTape", "Tensor", "MalError", "DimensionError", "GeometryError",
    "NumericsError", "MaskError", "SelectionError", "ConfigError",
    "DataError", "CheckpointError", "OptimError", "__version__",
]
