# Benchmark streams
from .base import BaseProblem, Example
from .pmnist import MnistDataset, PermutedMnistProblem, mnist_load_idx
from .scr import ScrConfig, SlowlyChangingRegression, scr_new

__all__ = [
    'BaseProblem',
    'Example',
    'MnistDataset',
    'PermutedMnistProblem',
    'ScrConfig',
    'SlowlyChangingRegression',
    'mnist_load_idx',
    'scr_new',
]
