"""Ontology-guided region classification for 3D scene-graph places."""

from .diffcore import Adam, Tape, Tensor, gradcheck
from .estimator import OntologyRegionClassifier
from .fuzzy import AggregatorConfig
from .grounding import AxiomSet, Metrics, TrainConfig, compute_loss, evaluate, run_ablation, train
from .model import ModelDims, RegionClassifier
from .ontology import CompletionConfig, ScoringConfig, SpatialOntology, build_by_completion, build_by_scoring
from .scenegraph import FeatureEncoder, SceneGraph, SynthConfig, generate_synthetic, planted_ontology

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AggregatorConfig",
    "AxiomSet",
    "CompletionConfig",
    "FeatureEncoder",
    "Metrics",
    "ModelDims",
    "OntologyRegionClassifier",
    "RegionClassifier",
    "SceneGraph",
    "ScoringConfig",
    "SpatialOntology",
    "SynthConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "build_by_completion",
    "build_by_scoring",
    "compute_loss",
    "evaluate",
    "generate_synthetic",
    "gradcheck",
    "planted_ontology",
    "run_ablation",
    "train",
]
