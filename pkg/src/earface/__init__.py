"""Multitask age and gender classification from profile-face and ear images."""

__version__ = "0.1.0"

from .data import DatasetManifest, Gender, ModalPair, SampleRecord, pair_modalities, read_manifest, stratified_split
from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    DimensionError,
    EarFaceError,
    ImageReadError,
    OutOfRangeError,
    PipelineError,
)
from .fusion import channel_fuse, fuse, intensity_fuse, spatial_fuse
from .losses import CenterBank, multitask_loss, task_loss, update_centers
from .model import AgeGenderNet, BackboneSpec, build_backbone
from .pipeline import Metrics, Stage, StagePlan, TrainingConfig, evaluate, run_stage_plan, train_stage
from .scorefuse import confidence, fuse_decisions

__all__ = [
    "AgeGenderNet",
    "BackboneSpec",
    "CenterBank",
    "ConfigError",
    "DataError",
    "DatasetManifest",
    "DegenerateInputError",
    "DimensionError",
    "EarFaceError",
    "Gender",
    "ImageReadError",
    "Metrics",
    "ModalPair",
    "OutOfRangeError",
    "PipelineError",
    "SampleRecord",
    "Stage",
    "StagePlan",
    "TrainingConfig",
    "build_backbone",
    "channel_fuse",
    "confidence",
    "evaluate",
    "fuse",
    "fuse_decisions",
    "intensity_fuse",
    "multitask_loss",
    "pair_modalities",
    "read_manifest",
    "run_stage_plan",
    "spatial_fuse",
    "stratified_split",
    "task_loss",
    "train_stage",
    "update_centers",
]
