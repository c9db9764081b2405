"""
Continual backpropagation: selective reinitialization of low-utility hidden units.

After every gradient step each hidden layer ages its units, updates a running
utility per unit, and replaces a fraction (replacement_rate per unit per
step) of its mature units with the lowest utility. A replaced unit gets fresh
incoming weights from the layer's initial distribution and zero outgoing
weights; its average contribution is moved into the consumers' biases first.

Utility measures:
    - random: fresh U[0, 1] sample every step
    - weight_magnitude: running average of sum |w_out|
    - contribution: running average of |h| * sum |w_out|
    - mean_corrected_contribution: running average of |h - f_hat| * sum |w_out|
    - adaptation: running average of 1 / sum |w_in|
    - overall: running average of |h - f_hat| * sum |w_out| / sum |w_in|
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, PlasticityError
from .network import ForwardTrace, Network, backward, forward
from .optim import AdamState, Optimizer, reset_adam_units


# floor(accumulator) tolerance; n_l * rho sums like 0.2 * 5 land a hair under 1.0
_ACCUMULATOR_TOL = 1e-9

# Keeps 1 / sum|w_in| finite for a unit whose incoming weights are all zero
_MIN_FAN_IN_MAGNITUDE = 1e-300


class UtilityKind(str, Enum):
    RANDOM = "random"
    WEIGHT_MAGNITUDE = "weight_magnitude"
    CONTRIBUTION = "contribution"
    MEAN_CORRECTED_CONTRIBUTION = "mean_corrected_contribution"
    ADAPTATION = "adaptation"
    OVERALL = "overall"


@dataclass(frozen=True)
class CbpConfig:
    """
    Attributes:
        replacement_rate: Units replaced per unit per step (rho)
        decay_rate: Running-average decay (eta), in [0, 1)
        maturity_threshold: Steps a fresh unit is protected from replacement
        utility: Which utility measure ranks the units
    """
    replacement_rate: float = 1e-4
    decay_rate: float = 0.99
    maturity_threshold: int = 100
    utility: UtilityKind = UtilityKind.OVERALL

    def __post_init__(self):
        if not self.replacement_rate >= 0.0:
            raise ConfigError("replacement_rate", f"must be >= 0, got {self.replacement_rate}")
        if not 0.0 <= self.decay_rate < 1.0:
            raise ConfigError("decay_rate", f"must be in [0, 1), got {self.decay_rate}")
        if int(self.maturity_threshold) != self.maturity_threshold or self.maturity_threshold < 0:
            raise ConfigError("maturity_threshold", f"must be a non-negative integer, got {self.maturity_threshold}")
        try:
            object.__setattr__(self, "utility", UtilityKind(self.utility))
        except ValueError:
            raise ConfigError("utility", f"unknown utility measure '{self.utility}'")


@dataclass
class LayerUnitState:
    """
    Per-unit bookkeeping for one hidden layer.

    Attributes:
        utility: Running value of the configured measure
        ranking: Bias-corrected utility used to pick units (previous running value / (1 - eta^age))
        mean_activation: Running average of the unit's output (f)
        mean_estimate: Bias-corrected average f_hat, transferred to consumer biases on replacement
        age: Steps since the unit was (re)initialized
        accumulator: Fractional replacements owed by this layer, in [0, 1)
    """
    utility: np.ndarray
    ranking: np.ndarray
    mean_activation: np.ndarray
    mean_estimate: np.ndarray
    age: np.ndarray
    accumulator: float = 0.0

    @classmethod
    def zeros(cls, n_units: int) -> "LayerUnitState":
        return cls(
            utility=np.zeros(n_units),
            ranking=np.zeros(n_units),
            mean_activation=np.zeros(n_units),
            mean_estimate=np.zeros(n_units),
            age=np.zeros(n_units, dtype=np.int64),
        )


@dataclass
class CbpState:
    layers: List[LayerUnitState]

    @classmethod
    def for_network(cls, net: Network) -> "CbpState":
        return cls([LayerUnitState.zeros(layer.fan_out) for layer in net.layers[:-1]])


@dataclass
class StepOutcome:
    loss: float
    prediction: np.ndarray
    replaced: int = 0


LossFn = Callable[[np.ndarray, object], Tuple[float, np.ndarray]]


def bias_correction(decay_rate: float, age: np.ndarray) -> np.ndarray:
    """1 - eta^age, computed in log space so huge ages saturate cleanly at 1"""
    if decay_rate == 0.0:
        return np.ones(age.shape)
    return -np.expm1(age * math.log(decay_rate))


def update_layer_utility(state: CbpState, layer: int, trace: ForwardTrace, net: Network,
                         cfg: CbpConfig, rng: Optional[np.random.Generator] = None) -> LayerUnitState:
    """Update utility, running mean and f_hat of one hidden layer after the weight update"""
    units = state.layers[layer]
    if np.any(units.age < 1):
        raise PlasticityError(f"layer {layer}: utilities updated before ages were incremented")

    eta = cfg.decay_rate
    h = trace.hidden(layer)
    correction = bias_correction(eta, units.age)

    f_prev = units.mean_activation
    units.mean_estimate = f_prev / correction
    units.mean_activation = eta * f_prev + (1.0 - eta) * h

    kind = cfg.utility
    if kind is UtilityKind.RANDOM:
        if rng is None:
            raise ConfigError("utility", "random utility needs a random generator")
        units.utility = rng.uniform(0.0, 1.0, size=h.shape[0])
        units.ranking = units.utility
        return units

    out_magnitude = np.abs(net.layers[layer + 1].weight).sum(axis=0)
    if kind is UtilityKind.WEIGHT_MAGNITUDE:
        instant = out_magnitude
    elif kind is UtilityKind.CONTRIBUTION:
        instant = np.abs(h) * out_magnitude
    elif kind is UtilityKind.MEAN_CORRECTED_CONTRIBUTION:
        instant = np.abs(h - units.mean_estimate) * out_magnitude
    else:
        in_magnitude = np.maximum(np.abs(net.layers[layer].weight).sum(axis=1), _MIN_FAN_IN_MAGNITUDE)
        if kind is UtilityKind.ADAPTATION:
            instant = 1.0 / in_magnitude
        else:
            instant = np.abs(h - units.mean_estimate) * out_magnitude / in_magnitude

    u_prev = units.utility
    units.ranking = u_prev / correction
    units.utility = eta * u_prev + (1.0 - eta) * instant
    return units


def update_utilities(state: CbpState, trace: ForwardTrace, net: Network, cfg: CbpConfig,
                     rng: Optional[np.random.Generator] = None) -> CbpState:
    for layer in range(len(state.layers)):
        update_layer_utility(state, layer, trace, net, cfg, rng)
    return state


def select_units_to_reinit(state: CbpState, layer: int, n_units: int, cfg: CbpConfig) -> List[int]:
    """
    Take this step's share of replacements and pick that many mature units.

    Units older than the maturity threshold are eligible; the ones with the
    smallest ranking win, lower index first on ties. A shortfall of eligible
    units is forgiven rather than carried over.
    """
    units = state.layers[layer]
    units.accumulator += n_units * cfg.replacement_rate
    count = int(math.floor(units.accumulator + _ACCUMULATOR_TOL))
    if count == 0:
        return []
    units.accumulator = max(units.accumulator - count, 0.0)

    eligible = np.flatnonzero(units.age > cfg.maturity_threshold)
    if eligible.size == 0:
        return []
    order = np.argsort(units.ranking[eligible], kind="stable")
    return sorted(int(i) for i in eligible[order[:count]])


def reinit_units(net: Network, state: CbpState, layer: int, units: Sequence[int],
                 rng: np.random.Generator, bound: Optional[float] = None,
                 adam: Optional[AdamState] = None) -> Tuple[Network, CbpState, Optional[AdamState]]:
    """
    Replace hidden units of `layer` with fresh ones.

    Consumers first absorb f_hat * w_out into their bias, then the outgoing
    weights are zeroed, the incoming weights are redrawn from U(-bound, bound)
    (the layer's initial bound by default) and the unit's bias and statistics
    are reset. With Adam, the moments and step counters of every weight
    touching the units are cleared too.
    """
    if not 0 <= layer < net.n_hidden:
        raise IndexError(f"layer {layer} is not a hidden layer")
    n = net.layers[layer].fan_out
    for unit in units:
        if not 0 <= unit < n:
            raise IndexError(f"unit {unit} out of range for layer {layer} with {n} units")
    if not units:
        return net, state, adam

    idx = np.asarray(units, dtype=np.int64)
    incoming, outgoing = net.layers[layer], net.layers[layer + 1]
    unit_state = state.layers[layer]

    outgoing.bias += outgoing.weight[:, idx] @ unit_state.mean_estimate[idx]
    outgoing.weight[:, idx] = 0.0

    b = incoming.init_bound if bound is None else bound
    incoming.weight[idx, :] = rng.uniform(-b, b, size=(idx.size, incoming.fan_in))
    incoming.bias[idx] = 0.0

    unit_state.utility[idx] = 0.0
    unit_state.ranking[idx] = 0.0
    unit_state.mean_activation[idx] = 0.0
    unit_state.mean_estimate[idx] = 0.0
    unit_state.age[idx] = 0

    if adam is not None:
        reset_adam_units(adam, layer, idx)
    return net, state, adam


def cbp_train_step(net: Network, state: CbpState, optimizer: Optimizer,
                   x: np.ndarray, target, cfg: CbpConfig, loss_fn: LossFn,
                   rng: np.random.Generator) -> StepOutcome:
    """One example of continual backpropagation: gradient step, then selective reinitialization"""
    trace = forward(net, x)
    loss, output_grad = loss_fn(trace.prediction, target)
    optimizer.step(net, backward(net, trace, output_grad))

    replaced = 0
    for layer in range(net.n_hidden):
        state.layers[layer].age += 1
        update_layer_utility(state, layer, trace, net, cfg, rng)
        units = select_units_to_reinit(state, layer, net.layers[layer].fan_out, cfg)
        if units:
            reinit_units(net, state, layer, units, rng)
            optimizer.reset_units(layer, units)
            replaced += len(units)
    return StepOutcome(loss, trace.prediction, replaced)
