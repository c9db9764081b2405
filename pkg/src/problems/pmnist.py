"""
Online Permuted MNIST.

Every task applies one fixed random pixel permutation to all training images
and presents them one by one in a fresh random order. The learner is never
told when a task ends.
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from ..config_loader import resolve_data_dir
from ..errors import ConfigError, DataError
from .base import BaseProblem, Example


logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_PIXELS = 28 * 28
N_CLASSES = 10

TRAIN_IMAGES = 'train-images-idx3-ubyte'
TRAIN_LABELS = 'train-labels-idx1-ubyte'

Seed = Union[int, Sequence[int]]


@dataclass
class MnistDataset:
    """
    Raw MNIST pixels and labels.

    Pixels stay uint8; images are divided by 255 on access so each process
    holds one byte per pixel.
    """
    pixels: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def images(self) -> np.ndarray:
        """All images as float64 in [0, 1]"""
        return self.pixels / 255.0

    def image(self, index: int) -> np.ndarray:
        return self.pixels[index] / 255.0


@dataclass
class PermutedTask:
    index: int
    permutation: np.ndarray
    order: np.ndarray


def _read_file(path: Path) -> bytes:
    try:
        if path.suffix == '.gz':
            with gzip.open(path, 'rb') as f:
                return f.read()
        with open(path, 'rb') as f:
            return f.read()
    except FileNotFoundError:
        raise DataError('path', "file not found", str(path))
    except OSError as e:
        raise DataError('path', f"cannot read file: {e}", str(path))


def _parse_idx(path: Path, magic: int, n_dims: int) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Parse a big-endian IDX file of unsigned bytes with n_dims dimensions"""
    data = _read_file(path)
    header_size = 4 + 4 * n_dims
    if len(data) < header_size:
        raise DataError('header', "truncated header", str(path))

    found = struct.unpack('>I', data[:4])[0]
    if found != magic:
        raise DataError('magic', f"expected 0x{magic:08x}, got 0x{found:08x}", str(path))
    shape = struct.unpack(f'>{n_dims}I', data[4:header_size])
    size = int(np.prod(shape))
    if len(data) < header_size + size:
        raise DataError('data', f"truncated data: header promises {size} bytes, "
                                f"file has {len(data) - header_size}", str(path))
    values = np.frombuffer(data, dtype=np.uint8, count=size, offset=header_size)
    return values.reshape(shape[0], -1), shape


def mnist_load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> MnistDataset:
    """Load an IDX image/label file pair (plain or .gz)"""
    images_path, labels_path = Path(images_path), Path(labels_path)
    pixels, image_shape = _parse_idx(images_path, IMAGE_MAGIC, 3)
    labels, label_shape = _parse_idx(labels_path, LABEL_MAGIC, 1)

    if image_shape[0] != label_shape[0]:
        raise DataError('count', f"count mismatch: {image_shape[0]} images, {label_shape[0]} labels",
                        str(labels_path))
    if pixels.shape[1] != N_PIXELS:
        raise DataError('dimensions', f"expected 28x28 images, got {image_shape[1]}x{image_shape[2]}",
                        str(images_path))
    labels = labels.reshape(-1).astype(np.int64)
    if labels.size and labels.max() >= N_CLASSES:
        raise DataError('labels', f"label {labels.max()} out of range", str(labels_path))
    return MnistDataset(pixels, labels)


def find_mnist_files(data_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Locate the training images and labels, compressed or not"""
    data_dir = Path(data_dir)
    found = []
    for stem in (TRAIN_IMAGES, TRAIN_LABELS):
        for candidate in (data_dir / stem, data_dir / f'{stem}.gz'):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise DataError('data_dir', f"{stem}[.gz] not found (run `python main.py fetch-mnist`)",
                            str(data_dir))
    return found[0], found[1]


@lru_cache(maxsize=2)
def load_training_set(data_dir: str) -> MnistDataset:
    images_path, labels_path = find_mnist_files(data_dir)
    logger.info("Loading MNIST from %s", data_dir)
    return mnist_load_idx(images_path, labels_path)


def generate_permutation(seed: Seed) -> np.ndarray:
    """Uniformly random bijection on the 784 pixel positions"""
    return np.random.default_rng(seed).permutation(N_PIXELS)


def apply_permutation(images: np.ndarray, permutation: np.ndarray) -> np.ndarray:
    return images[..., permutation]


def make_task(n_examples: int, index: int, seed: int, examples_per_task: int,
              with_replacement: bool = False) -> PermutedTask:
    if not with_replacement and examples_per_task > n_examples:
        raise ConfigError('examples_per_task',
                          f"{examples_per_task} exceeds the {n_examples} available examples")
    permutation = generate_permutation((seed, index))
    rng = np.random.default_rng((seed, index, 1))
    if with_replacement:
        order = rng.integers(0, n_examples, size=examples_per_task)
    else:
        order = rng.permutation(n_examples)[:examples_per_task]
    return PermutedTask(index, permutation, order)


def iterate_task(dataset: MnistDataset, task: PermutedTask) -> Iterator[Tuple[np.ndarray, int]]:
    for i in task.order:
        yield dataset.image(i)[task.permutation], int(dataset.labels[i])


def pmnist_task_stream(dataset: MnistDataset, n_tasks: int, seed: int,
                       examples_per_task: int = 60000,
                       with_replacement: bool = False) -> Iterator[Iterator[Tuple[np.ndarray, int]]]:
    """One (image, label) iterator per task, in task order"""
    for index in range(n_tasks):
        yield iterate_task(dataset, make_task(len(dataset), index, seed, examples_per_task, with_replacement))


class PermutedMnistProblem(BaseProblem):
    """
    Online Permuted MNIST as a benchmark stream.

    Config options:
        - n_tasks: Number of permutations to visit
        - examples_per_task: Images per task (60000 = one full pass)
        - with_replacement: Sample images with replacement (variable-rate variant)
    """

    def __init__(self, dataset: MnistDataset, n_tasks: int, examples_per_task: int,
                 seed: int, with_replacement: bool = False):
        if not with_replacement and examples_per_task > len(dataset):
            raise ConfigError('examples_per_task',
                              f"{examples_per_task} exceeds the {len(dataset)} available examples")
        self.dataset = dataset
        self.n_tasks = n_tasks
        self.examples_per_task = examples_per_task
        self.seed = seed
        self.with_replacement = with_replacement
        self.current: Optional[PermutedTask] = None

    @property
    def name(self) -> str:
        return 'pmnist'

    @property
    def input_size(self) -> int:
        return N_PIXELS

    @property
    def output_size(self) -> int:
        return N_CLASSES

    @property
    def loss(self) -> str:
        return 'cross_entropy'

    @property
    def total_steps(self) -> int:
        return self.n_tasks * self.examples_per_task

    def examples(self) -> Iterator[Example]:
        step = 0
        for index in range(self.n_tasks):
            self.current = make_task(len(self.dataset), index, self.seed,
                                     self.examples_per_task, self.with_replacement)
            for x, label in iterate_task(self.dataset, self.current):
                step += 1
                yield Example(x, label, index, step)

    def probe_inputs(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """A random sample of images under the current task's permutation"""
        n = len(self.dataset)
        indices = rng.choice(n, size=size, replace=size > n)
        images = self.dataset.pixels[indices] / 255.0
        if self.current is None:
            return images
        return apply_permutation(images, self.current.permutation)

    @classmethod
    def from_experiment(cls, cfg, rng: np.random.Generator) -> 'PermutedMnistProblem':
        dataset = load_training_set(str(resolve_data_dir(cfg.data_dir)))
        # One integer seeds every task's permutation and order for this run
        seed = int(rng.integers(2 ** 63))
        return cls(dataset, cfg.n_tasks, cfg.examples_per_task, seed, cfg.with_replacement)
