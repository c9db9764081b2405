"""Shared fixtures: generators, synthetic MNIST files and configs."""

from pathlib import Path

import numpy as np
import pytest

from src.config_loader import ConfigLoader, ExperimentConfig
from src.problems.pmnist import TRAIN_IMAGES, TRAIN_LABELS

from helpers import write_idx_images, write_idx_labels


PROJECT_ROOT = Path(__file__).parent.parent


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ('PLASTICITY_DATA_DIR', 'PLASTICITY_RESULTS_DIR', 'PLASTICITY_WORKERS', 'MNIST_BASE_URL'):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def loader():
    return ConfigLoader(PROJECT_ROOT / 'config' / 'presets.yaml')


@pytest.fixture
def mnist_dir(tmp_path):
    """A 100-image stand-in for the MNIST training files"""
    gen = np.random.default_rng(7)
    pixels = gen.integers(0, 256, size=(100, 784))
    labels = np.arange(100) % 10
    directory = tmp_path / 'mnist'
    directory.mkdir()
    write_idx_images(directory / TRAIN_IMAGES, pixels)
    write_idx_labels(directory / TRAIN_LABELS, labels)
    return directory


@pytest.fixture
def tiny_scr(tmp_path):
    """Regression config small enough to run in well under a second"""
    return ExperimentConfig(
        name='tiny',
        problem='scr',
        hidden_sizes=[5],
        activation='tanh',
        step_size=0.01,
        total_steps=2000,
        bin_size=500,
        scr_flip_period=200,
        n_runs=2,
        probe_size=50,
        output_dir=str(tmp_path / 'results'),
    )
