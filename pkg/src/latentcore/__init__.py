"""Incremental multi-domain learning with a shared Tucker-factorised weight space.

A task-agnostic 6th-order core per macro-module, together with small
per-task factor matrices, generates every 3x3 convolution kernel of a
residual network. New domains are learned by training only the factors,
batch-norm, the 1x1 projections and a classifier head, so earlier tasks
are never modified.
"""
from . import autodiff, checkpoint, data, errors, gradcheck, metrics, network, tensor, trainer, tucker
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, DomainShift, SyntheticDomainSpec, generate_dataset, make_domain_pair
from .errors import (
    CheckpointError,
    ChecksumError,
    ConfigError,
    DimensionMismatchError,
    DivergenceError,
    FrozenParameterError,
    LatentCoreError,
    ModeIndexError,
    RankError,
    SVDError,
    UnknownTaskError,
    VersionMismatchError,
)
from .metrics import decathlon_score, escore, param_report
from .network import ArchConfig, Model, build, forward, predict, trainable_params
from .tensor import TuckerTensor, hosvd, hooi, mode_product, refold, unfold
from .trainer import TrainConfig, adapt_task, orthogonality_loss, train_source
from .tucker import GroupLayout, ParamGroup, SharedCore, TaskFactorSet, materialize

__version__ = "0.1.0"
