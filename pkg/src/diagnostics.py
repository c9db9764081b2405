"""
Plasticity correlates: dead and saturated units, weight magnitude, effective rank.

All functions are pure; the harness calls probe_network() on a fresh probe
sample at every task (or bin) boundary.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import entropy

from .errors import ConfigError, UndefinedRankError, UnsupportedMeasureError
from .network import Network, forward_batch


# Singular values below this fraction of the largest count as zero
_SINGULAR_VALUE_CUTOFF = 1e-12


@dataclass(frozen=True)
class DiagnosticsConfig:
    """
    Attributes:
        sample_size: Number of probe examples
        saturation_epsilon: Distance to an activation extreme that counts as saturated
        layers: Hidden layers to probe (None = all)
    """
    sample_size: int = 2000
    saturation_epsilon: float = 0.01
    layers: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.sample_size < 1:
            raise ConfigError('probe_size', f"must be >= 1, got {self.sample_size}")
        if not self.saturation_epsilon > 0.0:
            raise ConfigError('saturation_epsilon', f"must be positive, got {self.saturation_epsilon}")


@dataclass
class DiagnosticsRecord:
    """
    Correlates measured at one boundary.

    dead_fraction holds the relu measure, saturated_fraction the sigmoid/tanh
    one; whichever does not apply to the hidden activation is None.

    A layer whose units are all silent on the probe has no rank. It is listed
    in silent_layers and left out of effective_rank, whose entries follow
    rank_layers.
    """
    task: int
    step: int
    avg_weight_magnitude: float
    effective_rank: List[float] = field(default_factory=list)
    dead_fraction: Optional[List[float]] = None
    saturated_fraction: Optional[List[float]] = None
    layers: List[int] = field(default_factory=list)
    rank_layers: List[int] = field(default_factory=list)
    silent_layers: List[int] = field(default_factory=list)

    @property
    def mean_effective_rank(self) -> float:
        return float(np.mean(self.effective_rank)) if self.effective_rank else float('nan')

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['mean_effective_rank'] = self.mean_effective_rank
        return data


def _hidden_layers(net: Network, layers: Optional[Sequence[int]]) -> List[int]:
    if layers is None:
        return list(range(net.n_hidden))
    for layer in layers:
        if not 0 <= layer < net.n_hidden:
            raise IndexError(f"layer {layer} is not a hidden layer")
    return list(layers)


def representation_matrix(net: Network, probe: np.ndarray, layer: int) -> np.ndarray:
    """Rows are the outputs of hidden layer `layer` for each probe example"""
    if not 0 <= layer < net.n_hidden:
        raise IndexError(f"layer {layer} is not a hidden layer")
    return forward_batch(net, probe)[layer + 1]


def count_dead_relu_units(net: Network, probe: np.ndarray) -> List[float]:
    """Fraction of units per hidden layer that output exactly 0 on every probe example"""
    for i, act in enumerate(net.hidden_activations()):
        if act.name != 'relu':
            raise UnsupportedMeasureError(
                f"dead units are defined for relu; layer {i} uses {act.name} (use saturation)")
    outputs = forward_batch(net, probe)
    return [float(np.mean(np.all(h == 0.0, axis=0))) for h in outputs[1:-1]]


def count_saturated_units(net: Network, probe: np.ndarray, epsilon: float) -> List[float]:
    """Fraction of units per hidden layer strictly within epsilon of an extreme on every probe example"""
    if epsilon < 0.0:
        raise ConfigError('saturation_epsilon', f"must be >= 0, got {epsilon}")
    extremes = []
    for i, act in enumerate(net.hidden_activations()):
        if act.extremes is None:
            raise UnsupportedMeasureError(
                f"saturation is defined for sigmoid and tanh; layer {i} uses {act.name}")
        extremes.append(act.extremes)
    outputs = forward_batch(net, probe)
    fractions = []
    for (lo, hi), h in zip(extremes, outputs[1:-1]):
        near = (np.abs(h - hi) < epsilon) | (np.abs(h - lo) < epsilon)
        fractions.append(float(np.mean(np.all(near, axis=0))))
    return fractions


def average_weight_magnitude(net: Network) -> float:
    total = sum(float(np.abs(layer.weight).sum()) for layer in net.layers)
    count = sum(layer.weight.size for layer in net.layers)
    return total / count


def effective_rank(matrix: np.ndarray) -> float:
    """exp of the entropy of the normalized singular values"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.isfinite(matrix).all():
        raise UndefinedRankError("effective rank needs a finite matrix")
    sv = np.linalg.svd(matrix, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        raise UndefinedRankError("effective rank of an all-zero matrix is undefined")
    sv = sv[sv > _SINGULAR_VALUE_CUTOFF * sv[0]]
    return float(math.exp(entropy(sv / sv.sum())))


def probe_network(net: Network, probe: np.ndarray, cfg: DiagnosticsConfig,
                  task: int = 0, step: int = 0) -> DiagnosticsRecord:
    """Measure every correlate that applies to this network"""
    layers = _hidden_layers(net, cfg.layers)
    record = DiagnosticsRecord(task=task, step=step,
                               avg_weight_magnitude=average_weight_magnitude(net),
                               layers=layers)
    if not layers:
        return record

    outputs = forward_batch(net, probe)
    for layer in layers:
        phi = outputs[layer + 1]
        if np.any(phi):
            record.effective_rank.append(effective_rank(phi))
            record.rank_layers.append(layer)
        else:
            record.silent_layers.append(layer)

    names = {act.name for act in net.hidden_activations()}
    if names == {'relu'}:
        dead = count_dead_relu_units(net, probe)
        record.dead_fraction = [dead[l] for l in layers]
    elif all(act.extremes is not None for act in net.hidden_activations()):
        saturated = count_saturated_units(net, probe, cfg.saturation_epsilon)
        record.saturated_fraction = [saturated[l] for l in layers]
    return record
