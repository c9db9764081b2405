"""Builders shared by the test modules."""

import gzip
import struct
from pathlib import Path

import numpy as np

from src.network import ActivationKind, Layer, Network, init_kaiming_uniform
from src.problems.pmnist import IMAGE_MAGIC, LABEL_MAGIC


def dense(weight, bias=None, activation='linear', init_bound=1.0) -> Layer:
    weight = np.array(weight, dtype=np.float64)
    bias = np.zeros(weight.shape[0]) if bias is None else np.array(bias, dtype=np.float64)
    return Layer(weight, bias, ActivationKind.parse(activation), init_bound)


def small_net(rng, dims=(4, 6, 3), activation='tanh') -> Network:
    hidden = len(dims) - 2
    return init_kaiming_uniform(list(dims), [activation] * hidden + ['linear'], rng)


def write_idx_images(path: Path, pixels: np.ndarray, compress: bool = False):
    n = pixels.shape[0]
    data = struct.pack('>IIII', IMAGE_MAGIC, n, 28, 28) + pixels.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, 'wb') as f:
        f.write(data)


def write_idx_labels(path: Path, labels: np.ndarray, compress: bool = False):
    data = struct.pack('>II', LABEL_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, 'wb') as f:
        f.write(data)
