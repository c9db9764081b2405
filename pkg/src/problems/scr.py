"""
Slowly-Changing Regression.

Inputs are m+1 bits: f slowly flipping bits (one of them flips every T
steps), m-f fresh random bits, and a constant 1. Targets come from a frozen
network of n linear threshold units with +-1 weights.

Usage:
    target, stream = scr_new(ScrConfig(seed=0))
    x, y = stream.next()
"""

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from ..errors import ConfigError, ShapeError
from .base import BaseProblem, Example


@dataclass(frozen=True)
class ScrConfig:
    """
    Attributes:
        m: Input bits, excluding the constant bit
        f: Slowly flipping bits (the first f inputs)
        n: Hidden LTUs in the target network
        T: Steps between flips
        beta: Proportion used in the LTU thresholds
        total_steps: Stream length
        seed: Seed of the target network and the example stream
        output_bias: Give the target's output layer a +-1 bias weight
    """
    m: int = 21
    f: int = 15
    n: int = 100
    T: int = 10000
    beta: float = 0.7
    total_steps: int = 3000000
    seed: int = 0
    output_bias: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError('scr_m', f"must be >= 1, got {self.m}")
        if not 0 <= self.f <= self.m:
            raise ConfigError('scr_f', f"must be in [0, {self.m}], got {self.f}")
        if self.n < 1:
            raise ConfigError('scr_n', f"must be >= 1, got {self.n}")
        if self.T < 1:
            raise ConfigError('scr_flip_period', f"must be >= 1, got {self.T}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError('scr_beta', f"must be in [0, 1], got {self.beta}")
        if self.total_steps < 1:
            raise ConfigError('total_steps', f"must be >= 1, got {self.total_steps}")


@dataclass(frozen=True)
class ScrTargetNet:
    """
    Frozen LTU target network.

    Attributes:
        weights: n x (m+1) matrix of +-1
        out_weights: n vector of +-1
        thresholds: (m+1) * beta - S_i, S_i the number of -1 entries in row i
        out_bias: +-1, or 0 when the output layer has no bias
    """
    weights: np.ndarray
    out_weights: np.ndarray
    thresholds: np.ndarray
    out_bias: float = 0.0

    @classmethod
    def from_weights(cls, weights: np.ndarray, out_weights: np.ndarray, beta: float,
                     out_bias: float = 0.0) -> 'ScrTargetNet':
        weights = np.array(weights, dtype=np.float64)
        negatives = np.count_nonzero(weights < 0, axis=1)
        thresholds = weights.shape[1] * beta - negatives
        for array in (weights, thresholds):
            array.setflags(write=False)
        out_weights = np.array(out_weights, dtype=np.float64)
        out_weights.setflags(write=False)
        return cls(weights, out_weights, thresholds, float(out_bias))


def ltu_forward(target: ScrTargetNet, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (target.weights.shape[1],):
        raise ShapeError(f"input shape {x.shape} != ({target.weights.shape[1]},)")
    hidden = (target.weights @ x > target.thresholds).astype(np.float64)
    return float(target.out_weights @ hidden + target.out_bias)


class ScrStream:
    """
    Single-consumer example stream.

    Step s (1-based) first flips one slow bit when s is a multiple of T, then
    emits [slow bits | fresh bits | 1] with the target network's output.
    """

    def __init__(self, cfg: ScrConfig, target: ScrTargetNet, rng: np.random.Generator):
        self.cfg = cfg
        self.target = target
        self.rng = rng
        self.slow_bits = rng.integers(0, 2, size=cfg.f).astype(np.float64)
        self.step = 0

    def next(self) -> Tuple[np.ndarray, float]:
        cfg = self.cfg
        self.step += 1
        if self.step % cfg.T == 0 and cfg.f > 0:
            i = self.rng.integers(cfg.f)
            self.slow_bits[i] = 1.0 - self.slow_bits[i]
        fast = self.rng.integers(0, 2, size=cfg.m - cfg.f).astype(np.float64)
        x = np.concatenate([self.slow_bits, fast, [1.0]])
        return x, ltu_forward(self.target, x)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, float]]:
        while self.step < self.cfg.total_steps:
            yield self.next()

    def sample_inputs(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Inputs from the current distribution, drawn without advancing the stream"""
        cfg = self.cfg
        inputs = np.empty((size, cfg.m + 1))
        inputs[:, :cfg.f] = self.slow_bits
        inputs[:, cfg.f:cfg.m] = rng.integers(0, 2, size=(size, cfg.m - cfg.f))
        inputs[:, cfg.m] = 1.0
        return inputs


def scr_new(cfg: ScrConfig, rng: Optional[np.random.Generator] = None) -> Tuple[ScrTargetNet, ScrStream]:
    """Draw the target network, then start the stream from the same generator"""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    weights = rng.choice([-1.0, 1.0], size=(cfg.n, cfg.m + 1))
    out_weights = rng.choice([-1.0, 1.0], size=cfg.n)
    out_bias = float(rng.choice([-1.0, 1.0])) if cfg.output_bias else 0.0
    target = ScrTargetNet.from_weights(weights, out_weights, cfg.beta, out_bias)
    return target, ScrStream(cfg, target, rng)


class SlowlyChangingRegression(BaseProblem):
    """
    Slowly-Changing Regression as a benchmark stream.

    There are no tasks; the harness treats each metrics bin as one.
    """

    def __init__(self, cfg: ScrConfig, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.target, self.stream = scr_new(cfg, rng)

    @property
    def name(self) -> str:
        return 'scr'

    @property
    def input_size(self) -> int:
        return self.cfg.m + 1

    @property
    def output_size(self) -> int:
        return 1

    @property
    def loss(self) -> str:
        return 'squared_error'

    @property
    def total_steps(self) -> int:
        return self.cfg.total_steps

    def examples(self) -> Iterator[Example]:
        for x, y in self.stream:
            yield Example(x, np.array([y]), 0, self.stream.step)

    def probe_inputs(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.stream.sample_inputs(rng, size)

    @classmethod
    def from_experiment(cls, cfg, rng: np.random.Generator) -> 'SlowlyChangingRegression':
        scr_cfg = ScrConfig(
            m=cfg.scr_m,
            f=cfg.scr_f,
            n=cfg.scr_n,
            T=cfg.scr_flip_period,
            beta=cfg.scr_beta,
            total_steps=cfg.total_steps,
            seed=cfg.base_seed,
            output_bias=cfg.scr_output_bias,
        )
        return cls(scr_cfg, rng)
