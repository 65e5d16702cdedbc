"""
Module implementing the Adam optimizer with bias correction.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from src.latent_domain_transfer.exceptions import GradientError
from src.latent_domain_transfer.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """
    Moment buffers and hyperparameters for one set of parameters.

    The buffers are created on the first step, shape-congruent with the
    parameters they track.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """
    Apply one bias-corrected Adam update in place and clear the gradients.

    Raises:
        GradientError: If any parameter holds no gradient.
    """
    missing = [index for index, param in enumerate(params) if param.grad is None]
    if missing:
        raise GradientError(f"Parameters {missing} have no gradient; run backward() first")

    if not state.m:
        state.m = [np.zeros_like(param.data) for param in params]
        state.v = [np.zeros_like(param.data) for param in params]
    state.t += 1

    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    for param, m, v in zip(params, state.m, state.v):
        grad = param.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)
        update = state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        param.data = (param.data - update).astype(param.dtype, copy=False)
        param.grad = None


class Adam:
    """
    Adam bound to a fixed list of parameters.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None
