"""
Base problem interface for all benchmark streams.

All problems should inherit from BaseProblem and implement examples().
This keeps the harness loop identical across benchmarks.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np


@dataclass
class Example:
    """
    One online example.

    Attributes:
        x: Input vector (float64)
        target: Regression target (float) or class label (int)
        task: Task index; read by the harness for metrics, never passed to the learner
        step: 1-based position in the stream
    """
    x: np.ndarray
    target: Union[float, int, np.ndarray]
    task: int
    step: int


class BaseProblem(ABC):
    """
    Abstract base class for all benchmark streams.

    Subclasses must implement:
        - name, input_size, output_size, loss, total_steps: Properties
        - examples(): Iterate the stream once
        - probe_inputs(rng, size): Inputs for diagnostics from the current distribution
    """

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @property
    @abstractmethod
    def input_size(self) -> int:
        pass

    @property
    @abstractmethod
    def output_size(self) -> int:
        pass

    @property
    @abstractmethod
    def loss(self) -> str:
        """'squared_error' or 'cross_entropy'"""
        pass

    @property
    @abstractmethod
    def total_steps(self) -> int:
        pass

    @property
    def classification(self) -> bool:
        return self.loss == 'cross_entropy'

    @abstractmethod
    def examples(self) -> Iterator[Example]:
        pass

    @abstractmethod
    def probe_inputs(self, rng: np.random.Generator, size: int) -> np.ndarray:
        pass

    @classmethod
    @abstractmethod
    def from_experiment(cls, cfg, rng: np.random.Generator) -> 'BaseProblem':
        """Build the stream for one run from an ExperimentConfig and the run's data generator"""
        pass
