"""Attention-based cross-layer domain alignment (ACDA) at desk scale."""

from .alignment import (
    LossBreakdown,
    PseudoLabels,
    combine,
    conditioned_cross_layer_loss,
    cross_layer_loss,
    pseudo_label,
    same_layer_loss,
)
from .attention import attention_weights, pair_similarities, reshape_r, uniform_attention
from .backbone import Backbone, BackboneSpec, ForwardOutput, cross_entropy
from .config import ConfigError, ExperimentConfig, load_config
from .data import DomainPairDataset, ShiftSpec, make_shapes_dataset, make_twomoons_dataset
from .kernels import KernelSpec, MedianHeuristic, median_bandwidth, mmd2_biased, multi_kernel, rbf_kernel
from .projection import ProjectionBank, ProjectionSpec, make_default_projection
from .trainer import ACDAModel, RunRecord, Trainer, align, evaluate, pretrain, run_experiment

__version__ = "0.1.0"
