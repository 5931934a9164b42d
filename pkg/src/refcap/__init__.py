"""Image captioning with a feature-refining encoder and reflective decoder."""

from refcap.data import (
    CaptionManifest, FeatureRecord, FeatureStore, Vocabulary, load_features,
    load_prepared, prepare_dataset, save_features, synth_features,
)
from refcap.inference import beam_search, evaluate_split, greedy_decode
from refcap.model import CaptionModel, ModelConfig
from refcap.tensor import Graph, Tensor, parameter
from refcap.training import Checkpoint, TrainConfig, train

__all__ = [
    "CaptionManifest", "CaptionModel", "Checkpoint", "FeatureRecord",
    "FeatureStore", "Graph", "ModelConfig", "Tensor", "TrainConfig",
    "Vocabulary", "beam_search", "evaluate_split", "greedy_decode",
    "load_features", "load_prepared", "parameter", "prepare_dataset",
    "save_features", "synth_features", "train",
]
__version__ = "0.1.0"
