"""Shared fixtures: tiny configs and the synthetic overfit dataset."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from refcap.data import (
    CaptionManifest, FeatureStore, prepare_dataset, synth_features,
)
from refcap.model import CaptionModel, ModelConfig


def tiny_config(vocab_size=12, dtype="float64", **overrides) -> ModelConfig:
    """Smallest full-variant config the gradient suites run at."""
    base = dict(
        vocab_size=vocab_size, feature_dim=8, global_dim=8, embed_dim=8,
        hidden_dim=8, attention_dim=8, reflect_dim=8, heads=2,
        refiner_layers=1, dropout=0.0, max_len=6, dtype=dtype,
    )
    base.update(overrides)
    return ModelConfig.for_variant(base.pop("variant", "refining"), **base)


def tiny_model(seed=0, **overrides) -> CaptionModel:
    return CaptionModel(tiny_config(**overrides), seed=seed)


def tiny_record(seed=0, image_id="img", k=3, dim=8, global_dim=8):
    return synth_features(seed, image_id, k, dim, global_dim)


OVERFIT_CAPTIONS = [
    "a red bird sits high",
    "the dog runs fast",
    "a cat sleeps on the mat",
    "two birds fly fast",
    "the boy kicks a ball",
    "a girl sits on the mat",
    "the cat jumps high",
    "a blue bird sits",
    "the dog plays on grass",
    "the boy plays on grass",
]


def overfit_dataset(seed=11, k=3, dim=16, global_dim=16):
    """Ten images with fixed captions; every split is the same ten images,
    so an overfit model should score perfectly on its own data."""
    entries = []
    for i, caption in enumerate(OVERFIT_CAPTIONS):
        entries.append({"id": f"ov{i}", "split": "train", "captions": [caption]})
    manifest = CaptionManifest.from_json(entries)
    store = FeatureStore([synth_features(seed, f"ov{i}", k, dim, global_dim)
                          for i in range(len(OVERFIT_CAPTIONS))])
    return prepare_dataset(manifest, store, min_count=1, max_len=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class OverfitRun:
    """Train-to-memorization fixture shared by training/inference/acceptance."""

    def __init__(self):
        from refcap.training import TrainConfig, train

        self.dataset = overfit_dataset()
        config = ModelConfig.for_variant(
            "refining", vocab_size=len(self.dataset.vocab),
            feature_dim=16, global_dim=16, embed_dim=24, hidden_dim=48,
            attention_dim=24, reflect_dim=24, heads=2, refiner_layers=1,
            dropout=0.0, max_len=6, dtype="float32")
        self.model = CaptionModel(config, seed=7)
        self.train_config = TrainConfig(
            epochs=200, batch_size=10, learning_rate=0.01, dropout=0.0,
            patience=200, seed=5, val_split="train")
        self.result = train(self.model, self.dataset, self.train_config)


@pytest.fixture(scope="session")
def overfit_run():
    return OverfitRun()
