"""Parallel learning of linear latent tree models from multivariate data."""

from latree.config import RunConfig
from latree.errors import (
    AlignmentError,
    DecompositionError,
    DisconnectedGraphError,
    LatentTreeError,
    LeafSetMismatchError,
    ModelError,
    NonConvergenceError,
    SampleFormatError,
)
from latree.evaluate import parameter_error, robinson_foulds
from latree.model import GroundTruthModel, LatentTree, SampleSet
from latree.oracle import ModelMoments, exact_moments, random_latent_tree, sample_model
from latree.pipeline import LearnResult, learn

__all__ = [
    "AlignmentError",
    "DecompositionError",
    "DisconnectedGraphError",
    "GroundTruthModel",
    "LatentTree",
    "LatentTreeError",
    "LearnResult",
    "LeafSetMismatchError",
    "ModelError",
    "ModelMoments",
    "NonConvergenceError",
    "RunConfig",
    "SampleFormatError",
    "SampleSet",
    "exact_moments",
    "learn",
    "parameter_error",
    "random_latent_tree",
    "robinson_foulds",
    "sample_model",
]
