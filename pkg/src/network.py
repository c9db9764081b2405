"""
Dense feed-forward networks trained one example at a time.

Each layer holds a weight matrix W (fan_out x fan_in), a bias vector and an
activation. Everything is float64; gradient checks and multi-million-step
runs both depend on it.

Usage:
    rng = np.random.default_rng(0)
    net = init_kaiming_uniform([22, 5, 1], ["tanh", "linear"], rng)
    trace = forward(net, x)
    loss, grad = loss_squared_error(trace.prediction, target)
    grads = backward(net, trace, grad)
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .errors import ConfigError, ShapeError


ACTIVATION_NAMES = ("sigmoid", "tanh", "relu", "leaky_relu", "elu", "swish", "linear")

# Only these two kinds take a parameter
DEFAULT_ALPHA = {
    "leaky_relu": 0.01,
    "elu": 1.0,
}


def kaiming_gain(name: str, alpha: float = 0.0) -> float:
    """Gain that keeps the input magnitude constant across layers"""
    if name == "tanh":
        return 5.0 / 3.0
    if name in ("sigmoid", "linear"):
        return 1.0
    if name == "leaky_relu":
        return math.sqrt(2.0 / (1.0 + alpha ** 2))
    if name in ("relu", "elu", "swish"):
        return math.sqrt(2.0)
    raise ConfigError("activation", f"unknown activation '{name}'")


@dataclass(frozen=True)
class ActivationKind:
    """
    Elementwise nonlinearity.

    Attributes:
        name: One of ACTIVATION_NAMES
        alpha: Negative slope for leaky_relu (0 < alpha < 1), scale for elu (alpha > 0)
    """
    name: str
    alpha: float = 0.0

    def __post_init__(self):
        if self.name not in ACTIVATION_NAMES:
            raise ConfigError("activation", f"unknown activation '{self.name}'")
        if self.name == "leaky_relu" and not 0.0 < self.alpha < 1.0:
            raise ConfigError("activation", f"leaky_relu slope must be in (0, 1), got {self.alpha}")
        if self.name == "elu" and not self.alpha > 0.0:
            raise ConfigError("activation", f"elu alpha must be positive, got {self.alpha}")
        if self.name not in DEFAULT_ALPHA and self.alpha != 0.0:
            raise ConfigError("activation", f"{self.name} takes no parameter")

    @classmethod
    def parse(cls, text: Union[str, "ActivationKind"]) -> "ActivationKind":
        """Parse 'relu', 'leaky_relu:0.1', 'elu:1.0' and the like"""
        if isinstance(text, ActivationKind):
            return text
        name, _, alpha = str(text).partition(":")
        name = name.strip()
        if alpha.strip():
            try:
                value = float(alpha)
            except ValueError:
                raise ConfigError("activation", f"bad parameter in '{text}'")
        else:
            value = DEFAULT_ALPHA.get(name, 0.0)
        return cls(name, value)

    def __str__(self) -> str:
        if self.name in DEFAULT_ALPHA:
            return f"{self.name}:{self.alpha!r}"
        return self.name

    @property
    def gain(self) -> float:
        return kaiming_gain(self.name, self.alpha)

    @property
    def extremes(self) -> Optional[Tuple[float, float]]:
        """(lo, hi) for bounded activations, None otherwise"""
        if self.name == "sigmoid":
            return (0.0, 1.0)
        if self.name == "tanh":
            return (-1.0, 1.0)
        return None

    def apply(self, z: np.ndarray) -> np.ndarray:
        name = self.name
        if name == "sigmoid":
            return expit(z)
        if name == "tanh":
            return np.tanh(z)
        if name == "relu":
            return np.maximum(z, 0.0)
        if name == "leaky_relu":
            return np.where(z > 0.0, z, self.alpha * z)
        if name == "elu":
            return np.where(z > 0.0, z, self.alpha * np.expm1(np.minimum(z, 0.0)))
        if name == "swish":
            return z * expit(z)
        return z

    def derivative(self, z: np.ndarray) -> np.ndarray:
        """d activation / dz, with the kink of relu-like kinds at 0 taken as the left slope"""
        name = self.name
        if name == "sigmoid":
            s = expit(z)
            return s * (1.0 - s)
        if name == "tanh":
            t = np.tanh(z)
            return 1.0 - t * t
        if name == "relu":
            return (z > 0.0).astype(np.float64)
        if name == "leaky_relu":
            return np.where(z > 0.0, 1.0, self.alpha)
        if name == "elu":
            return np.where(z > 0.0, 1.0, self.alpha * np.exp(np.minimum(z, 0.0)))
        if name == "swish":
            s = expit(z)
            return s + z * s * (1.0 - s)
        return np.ones_like(z)


def activation_gain(kind: ActivationKind) -> float:
    return kind.gain


@dataclass
class Layer:
    """
    One dense layer.

    Attributes:
        weight: fan_out x fan_in matrix
        bias: fan_out vector
        activation: Nonlinearity applied to weight @ h + bias
        init_bound: Half-width of the uniform distribution the weights were drawn from
    """
    weight: np.ndarray
    bias: np.ndarray
    activation: ActivationKind
    init_bound: float = 0.0

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class Network:
    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.bias.shape != (layer.fan_out,):
                raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} != ({layer.fan_out},)")
            if i > 0 and layer.fan_in != self.layers[i - 1].fan_out:
                raise ShapeError(
                    f"layer {i}: fan_in {layer.fan_in} != fan_out of layer {i - 1} "
                    f"({self.layers[i - 1].fan_out})"
                )

    @property
    def dims(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    @property
    def n_hidden(self) -> int:
        return len(self.layers) - 1

    def hidden_activations(self) -> List[ActivationKind]:
        return [layer.activation for layer in self.layers[:-1]]

    def copy(self) -> "Network":
        return Network([
            Layer(l.weight.copy(), l.bias.copy(), l.activation, l.init_bound)
            for l in self.layers
        ])

    def is_finite(self) -> bool:
        return all(
            np.isfinite(l.weight).all() and np.isfinite(l.bias).all()
            for l in self.layers
        )


@dataclass
class ForwardTrace:
    """
    Everything forward() computed for one input.

    post[0] is the input itself, post[i + 1] the output of layer i, and
    pre[i] the pre-activation of layer i. masks[i] is the dropout scale
    vector applied to layer i's output (None when no dropout).
    """
    pre: List[np.ndarray]
    post: List[np.ndarray]
    masks: List[Optional[np.ndarray]]

    @property
    def prediction(self) -> np.ndarray:
        return self.post[-1]

    def hidden(self, layer: int) -> np.ndarray:
        """Output of hidden layer `layer` (0-based over net.layers)"""
        return self.post[layer + 1]


@dataclass
class Gradients:
    """dloss/dW and dloss/db, one entry per layer"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, net: Network) -> "Gradients":
        return cls(
            [np.zeros_like(l.weight) for l in net.layers],
            [np.zeros_like(l.bias) for l in net.layers],
        )

    def check_congruent(self, net: Network):
        if len(self.weights) != len(net.layers) or len(self.biases) != len(net.layers):
            raise ShapeError("gradients and network have different depths")
        for i, layer in enumerate(net.layers):
            if self.weights[i].shape != layer.weight.shape or self.biases[i].shape != layer.bias.shape:
                raise ShapeError(f"layer {i}: gradient shape does not match network")


def init_kaiming_uniform(
    dims: Sequence[int],
    activations: Sequence[Union[str, ActivationKind]],
    rng: np.random.Generator,
) -> Network:
    """
    Build a network with W ~ U(-b, b), b = gain * sqrt(3 / fan_in), and zero biases.

    Args:
        dims: Layer sizes including input and output, e.g. [784, 100, 100, 10]
        activations: One activation per weight layer (len(dims) - 1)
        rng: Source of the weight samples
    """
    if len(dims) < 2:
        raise ConfigError("dims", f"need input and output sizes, got {list(dims)}")
    if any(int(d) < 1 for d in dims):
        raise ConfigError("dims", f"layer sizes must be >= 1, got {list(dims)}")
    if len(activations) != len(dims) - 1:
        raise ConfigError("activations", f"expected {len(dims) - 1} activations, got {len(activations)}")

    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        kind = ActivationKind.parse(act)
        bound = kind.gain * math.sqrt(3.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(int(fan_out), int(fan_in)))
        layers.append(Layer(weight, np.zeros(int(fan_out)), kind, bound))
    return Network(layers)


def forward(
    net: Network,
    x: np.ndarray,
    masks: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> ForwardTrace:
    """Run one input through the network, keeping every intermediate value"""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 1 or h.shape[0] != net.layers[0].fan_in:
        raise ShapeError(f"input shape {h.shape} != ({net.layers[0].fan_in},)")
    if masks is None:
        masks = [None] * len(net.layers)

    pre, post = [], [h]
    for layer, mask in zip(net.layers, masks):
        z = layer.weight @ h + layer.bias
        h = layer.activation.apply(z)
        if mask is not None:
            h = h * mask
        pre.append(z)
        post.append(h)
    return ForwardTrace(pre, post, list(masks))


def forward_batch(net: Network, inputs: np.ndarray) -> List[np.ndarray]:
    """Row-wise forward pass; returns [inputs, h_1, ..., h_L]"""
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.layers[0].fan_in:
        raise ShapeError(f"input batch shape {h.shape} incompatible with fan_in {net.layers[0].fan_in}")
    outputs = [h]
    for layer in net.layers:
        h = layer.activation.apply(h @ layer.weight.T + layer.bias)
        outputs.append(h)
    return outputs


def backward(net: Network, trace: ForwardTrace, output_grad: np.ndarray) -> Gradients:
    """Reverse-mode gradients of the loss whose gradient at the output is output_grad"""
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != (net.layers[-1].fan_out,):
        raise ShapeError(f"output gradient shape {g.shape} != ({net.layers[-1].fan_out},)")

    n = len(net.layers)
    weights: List[np.ndarray] = [None] * n
    biases: List[np.ndarray] = [None] * n
    for i in reversed(range(n)):
        layer = net.layers[i]
        if trace.masks[i] is not None:
            g = g * trace.masks[i]
        delta = g * layer.activation.derivative(trace.pre[i])
        weights[i] = np.outer(delta, trace.post[i])
        biases[i] = delta
        if i > 0:
            g = layer.weight.T @ delta
    return Gradients(weights, biases)


def loss_squared_error(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.sum(diff * diff)), 2.0 * diff


def loss_softmax_cross_entropy(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(label) < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} classes")
    label = int(label)
    loss = float(logsumexp(logits) - logits[label])
    grad = softmax(logits)
    grad[label] -= 1.0
    return loss, grad
