"""
A network plus everything that updates it: optimizer, regularizers and,
optionally, continual backpropagation.

The learner sees inputs and targets only; task boundaries never reach it.
"""

from typing import Dict, Optional

import numpy as np

from .cbp import CbpConfig, CbpState, LossFn, StepOutcome, cbp_train_step
from .errors import ConfigError
from .network import (
    Network,
    backward,
    forward,
    loss_softmax_cross_entropy,
    loss_squared_error,
)
from .optim import Optimizer, dropout_forward


LOSSES: Dict[str, LossFn] = {
    'squared_error': loss_squared_error,
    'cross_entropy': loss_softmax_cross_entropy,
}


class Learner:
    """
    Online learner: one gradient step per example.

    Usage:
        learner = Learner(net, SgdOptimizer(net, SgdConfig(0.01)), loss='squared_error')
        outcome = learner.train_step(x, target)
    """

    def __init__(
        self,
        net: Network,
        optimizer: Optimizer,
        loss: str,
        dropout_p: float = 0.0,
        cbp: Optional[CbpConfig] = None,
        dropout_rng: Optional[np.random.Generator] = None,
        cbp_rng: Optional[np.random.Generator] = None,
    ):
        if loss not in LOSSES:
            raise ConfigError('loss', f"unknown loss '{loss}'")
        if cbp is not None and dropout_p > 0.0:
            raise ConfigError('mitigations', "cbp and dropout cannot be combined")
        if cbp is not None and net.n_hidden == 0:
            raise ConfigError('mitigations', "cbp needs at least one hidden layer")
        if dropout_p > 0.0 and dropout_rng is None:
            raise ConfigError('dropout_p', "dropout needs a random generator")
        if cbp is not None and cbp_rng is None:
            raise ConfigError('mitigations', "cbp needs a random generator")

        self.net = net
        self.optimizer = optimizer
        self.loss = loss
        self.loss_fn = LOSSES[loss]
        self.dropout_p = dropout_p
        self.dropout_rng = dropout_rng
        self.cbp = cbp
        self.cbp_rng = cbp_rng
        self.cbp_state = CbpState.for_network(net) if cbp is not None else None
        self.replacements = 0

    def train_step(self, x: np.ndarray, target) -> StepOutcome:
        """
        Predict, take the loss, update.

        The returned prediction and loss are the ones made before the update;
        with dropout they come from a separate pass without masks.
        """
        if self.cbp is not None:
            outcome = cbp_train_step(
                self.net, self.cbp_state, self.optimizer, x, target,
                self.cbp, self.loss_fn, self.cbp_rng,
            )
            self.replacements += outcome.replaced
            return outcome

        if self.dropout_p > 0.0:
            prediction = forward(self.net, x).prediction
            clean_loss, _ = self.loss_fn(prediction, target)
            trace = dropout_forward(self.net, x, self.dropout_p, self.dropout_rng)
            _, output_grad = self.loss_fn(trace.prediction, target)
            self.optimizer.step(self.net, backward(self.net, trace, output_grad))
            return StepOutcome(clean_loss, prediction)

        trace = forward(self.net, x)
        loss, output_grad = self.loss_fn(trace.prediction, target)
        self.optimizer.step(self.net, backward(self.net, trace, output_grad))
        return StepOutcome(loss, trace.prediction)
