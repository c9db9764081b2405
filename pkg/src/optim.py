"""
Per-example weight updates: SGD (with momentum), Adam, L2, shrink-and-perturb, dropout.

The functional updates modify the network in place and return it. The
Optimizer classes bundle them with whatever state they carry so the learner
can treat SGD and Adam alike, including the per-unit state resets that
selective reinitialization needs.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .network import ForwardTrace, Gradients, Network, forward


@dataclass(frozen=True)
class SgdConfig:
    step_size: float
    momentum: float = 0.0

    def __post_init__(self):
        if not self.step_size > 0.0:
            raise ConfigError("step_size", f"must be positive, got {self.step_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", f"must be in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class RegularizerConfig:
    """
    Attributes:
        weight_decay: lambda of the 0.5 * lambda * ||W||^2 penalty
        perturb_variance: Variance of the Gaussian noise added to weights after each update
        dropout_p: Probability of zeroing each hidden unit during training
        noise_after_step: Add the perturbation after (True) or before the gradient step
    """
    weight_decay: float = 0.0
    perturb_variance: float = 0.0
    dropout_p: float = 0.0
    noise_after_step: bool = True

    def __post_init__(self):
        if not self.weight_decay >= 0.0:
            raise ConfigError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if not self.perturb_variance >= 0.0:
            raise ConfigError("perturb_variance", f"must be >= 0, got {self.perturb_variance}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p", f"must be in [0, 1), got {self.dropout_p}")


@dataclass
class AdamState:
    """
    Adam moments with a step counter per weight.

    Per-weight counters let selective reinitialization restart bias
    correction for just the weights it resets.
    """
    step_size: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m_w: List[np.ndarray] = field(default_factory=list)
    m_b: List[np.ndarray] = field(default_factory=list)
    v_w: List[np.ndarray] = field(default_factory=list)
    v_b: List[np.ndarray] = field(default_factory=list)
    t_w: List[np.ndarray] = field(default_factory=list)
    t_b: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.step_size > 0.0:
            raise ConfigError("step_size", f"must be positive, got {self.step_size}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(name, f"must be in [0, 1), got {value}")
        if not self.eps > 0.0:
            raise ConfigError("epsilon", f"must be positive, got {self.eps}")

    @classmethod
    def zeros(cls, net: Network, step_size: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            step_size, beta1, beta2, eps,
            m_w=[np.zeros_like(l.weight) for l in net.layers],
            m_b=[np.zeros_like(l.bias) for l in net.layers],
            v_w=[np.zeros_like(l.weight) for l in net.layers],
            v_b=[np.zeros_like(l.bias) for l in net.layers],
            t_w=[np.zeros(l.weight.shape, dtype=np.int64) for l in net.layers],
            t_b=[np.zeros(l.bias.shape, dtype=np.int64) for l in net.layers],
        )


def sgd_step(net: Network, grads: Gradients, cfg: SgdConfig,
             momentum_buffers: Optional[Gradients] = None) -> Network:
    """buffer <- mu * buffer + g; w <- w - alpha * buffer (plain SGD when mu = 0)"""
    grads.check_congruent(net)
    use_momentum = cfg.momentum > 0.0
    if use_momentum and momentum_buffers is None:
        raise ConfigError("momentum", "momentum > 0 needs momentum buffers")

    for i, layer in enumerate(net.layers):
        gw, gb = grads.weights[i], grads.biases[i]
        if use_momentum:
            buf_w, buf_b = momentum_buffers.weights[i], momentum_buffers.biases[i]
            buf_w *= cfg.momentum
            buf_w += gw
            buf_b *= cfg.momentum
            buf_b += gb
            gw, gb = buf_w, buf_b
        layer.weight -= cfg.step_size * gw
        layer.bias -= cfg.step_size * gb
    return net


def _adam_update(param: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                 t: np.ndarray, state: AdamState):
    t += 1
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - np.power(state.beta1, t))
    v_hat = v / (1.0 - np.power(state.beta2, t))
    param -= state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)


def adam_step(net: Network, grads: Gradients, state: AdamState) -> Network:
    grads.check_congruent(net)
    for i, layer in enumerate(net.layers):
        _adam_update(layer.weight, grads.weights[i], state.m_w[i], state.v_w[i], state.t_w[i], state)
        _adam_update(layer.bias, grads.biases[i], state.m_b[i], state.v_b[i], state.t_b[i], state)
    return net


def apply_l2(grads: Gradients, net: Network, weight_decay: float) -> Gradients:
    """Gradient of 0.5 * lambda * ||W||^2 added to the weight gradients; biases untouched"""
    if weight_decay < 0.0:
        raise ConfigError("weight_decay", f"must be >= 0, got {weight_decay}")
    if weight_decay == 0.0:
        return grads
    return Gradients(
        [g + weight_decay * layer.weight for g, layer in zip(grads.weights, net.layers)],
        list(grads.biases),
    )


def perturb_weights(net: Network, variance: float, rng: np.random.Generator) -> Network:
    """Add N(0, variance) noise to every weight (not biases)"""
    if variance <= 0.0:
        return net
    std = math.sqrt(variance)
    for layer in net.layers:
        layer.weight += rng.normal(0.0, std, size=layer.weight.shape)
    return net


def shrink_and_perturb_step(net: Network, grads: Gradients, cfg: SgdConfig,
                            reg: RegularizerConfig, rng: np.random.Generator,
                            momentum_buffers: Optional[Gradients] = None) -> Network:
    """SGD on the L2-penalised gradient plus Gaussian weight noise"""
    if not reg.noise_after_step:
        perturb_weights(net, reg.perturb_variance, rng)
    sgd_step(net, apply_l2(grads, net, reg.weight_decay), cfg, momentum_buffers)
    if reg.noise_after_step:
        perturb_weights(net, reg.perturb_variance, rng)
    return net


def dropout_forward(net: Network, x: np.ndarray, p: float,
                    rng: np.random.Generator) -> ForwardTrace:
    """
    Forward pass with inverted dropout on every hidden layer.

    Surviving units are scaled by 1 / (1 - p); the masks are kept on the trace
    so backward() only routes gradient through them.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError("dropout_p", f"must be in [0, 1), got {p}")
    if p == 0.0:
        return forward(net, x)
    masks: List[Optional[np.ndarray]] = []
    for layer in net.layers[:-1]:
        keep = rng.random(layer.fan_out) >= p
        masks.append(keep / (1.0 - p))
    masks.append(None)
    return forward(net, x, masks)


def zero_unit_entries(weights: List[np.ndarray], biases: List[np.ndarray],
                      layer: int, units: Sequence[int]):
    """Zero the per-weight state of hidden units: incoming rows, own bias, outgoing columns"""
    units = list(units)
    if not units:
        return
    weights[layer][units, :] = 0
    biases[layer][units] = 0
    weights[layer + 1][:, units] = 0


def reset_adam_units(state: AdamState, layer: int, units: Sequence[int]):
    for weights, biases in ((state.m_w, state.m_b), (state.v_w, state.v_b), (state.t_w, state.t_b)):
        zero_unit_entries(weights, biases, layer, units)


class Optimizer(ABC):
    """
    Applies one update per example.

    Subclasses must implement:
        - step(net, grads): Update the network in place and return it
    """

    def __init__(self, reg: Optional[RegularizerConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        self.reg = reg or RegularizerConfig()
        if self.reg.perturb_variance > 0.0 and rng is None:
            raise ConfigError("perturb_variance", "weight noise needs a random generator")
        self.rng = rng

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @abstractmethod
    def step(self, net: Network, grads: Gradients) -> Network:
        pass

    def reset_units(self, layer: int, units: Sequence[int]):
        """Forget any state attached to weights of reinitialized hidden units"""
        pass


class SgdOptimizer(Optimizer):

    def __init__(self, net: Network, cfg: SgdConfig,
                 reg: Optional[RegularizerConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__(reg, rng)
        self.cfg = cfg
        self.buffers = Gradients.zeros_like(net) if cfg.momentum > 0.0 else None

    @property
    def name(self) -> str:
        return "sgd"

    def step(self, net: Network, grads: Gradients) -> Network:
        if self.reg.perturb_variance > 0.0:
            return shrink_and_perturb_step(net, grads, self.cfg, self.reg, self.rng, self.buffers)
        return sgd_step(net, apply_l2(grads, net, self.reg.weight_decay), self.cfg, self.buffers)

    def reset_units(self, layer: int, units: Sequence[int]):
        if self.buffers is not None:
            zero_unit_entries(self.buffers.weights, self.buffers.biases, layer, units)


class AdamOptimizer(Optimizer):

    def __init__(self, state: AdamState,
                 reg: Optional[RegularizerConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__(reg, rng)
        self.state = state

    @property
    def name(self) -> str:
        return "adam"

    def step(self, net: Network, grads: Gradients) -> Network:
        if not self.reg.noise_after_step:
            perturb_weights(net, self.reg.perturb_variance, self.rng)
        adam_step(net, apply_l2(grads, net, self.reg.weight_decay), self.state)
        if self.reg.noise_after_step:
            perturb_weights(net, self.reg.perturb_variance, self.rng)
        return net

    def reset_units(self, layer: int, units: Sequence[int]):
        reset_adam_units(self.state, layer, units)
