# backend/tests/conftest.py
# Pytest fixtures and shared test utilities

import os
import sys

import numpy as np
import pytest

# Add parent directory to path to import backend modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dataset import WindowDataset
from model_store import build_model
from models import BackboneConfig, ModelConfig, RecurrentConfig, SynthSpec, TrainConfig

from tests.builders import random_windows, tiny_model_config


@pytest.fixture
def rng():
    """Seeded generator for reproducible test inputs"""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_config):
    """Randomly initialised float64 model on 16x16 input"""
    return build_model(tiny_config, ["class_a", "class_b"], seed=7, dtype=np.float64)


@pytest.fixture
def full_config():
    """Full-size architecture (4 attention stages, 3 Bi-GRU layers) on 32x32 input"""
    return ModelConfig(
        backbone=BackboneConfig(input_height=32, input_width=32),
        recurrent=RecurrentConfig(num_classes=3),
    )


@pytest.fixture
def zero_model(full_config):
    """All-zero weights: every gate evaluates to sigmoid(0) = 0.5"""
    return build_model(full_config, ["a", "b", "c"], seed=0, init="zeros")


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        learning_rate=1e-2, batch_size=2, epochs=2, seed=3, sequence_length=4
    )


@pytest.fixture
def tiny_dataset(rng, tiny_config):
    """Six labelled windows for the tiny model"""
    windows = random_windows(rng, 6, tiny_config)
    return WindowDataset(
        windows=windows,
        labels=np.array([0, 1, 0, 1, 0, 1]),
        sources=[f"clip{i}" for i in range(6)],
    )


@pytest.fixture
def synth_spec():
    """Small synthetic dataset: 3 motion classes, 16x16 clips"""
    return SynthSpec(num_classes=3, clips_per_class=4, frames=16, size=16)
