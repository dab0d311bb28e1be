"""Two-teacher confidence-weighted self-training for hand keypoints and masks,
at desk scale on procedurally rendered hands.

Submodules: ``autodiff`` (reverse-mode tensors, Adam, checkpoints), ``nethead``
(the two-head network and heatmap coding), ``augment`` (paired augmentations),
``losses``, ``synthhands`` (data), ``trainer``, ``evalkit`` (metrics and
analyses), ``pipeline`` (config-driven stages) and ``cli``.
"""
from . import augment, autodiff, evalkit, losses, nethead, pipeline, synthhands, trainer
from .augment import AugConfig, AugPair, sample_aug
from .losses import LossWeights, confidence_weight
from .nethead import ArchConfig, NetParams, build_network, decode_keypoints, encode_heatmaps, forward
from .pipeline import ExperimentConfig, load_config
from .synthhands import DomainConfig, build_dataset, source_domain, target_domain
from .trainer import METHODS, TrainConfig, adapt, train_source

__version__ = "0.1.0"

__all__ = [
    "augment", "autodiff", "evalkit", "losses", "nethead", "pipeline", "synthhands", "trainer",
    "AugConfig", "AugPair", "sample_aug", "LossWeights", "confidence_weight", "ArchConfig", "NetParams",
    "build_network", "decode_keypoints", "encode_heatmaps", "forward", "ExperimentConfig", "load_config",
    "DomainConfig", "build_dataset", "source_domain", "target_domain", "METHODS", "TrainConfig", "adapt",
    "train_source",
]
