"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def like(cls, param: Tensor, **hparams) -> "AdamWState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hparams)


def adamw_step(param: Tensor, grad: np.ndarray, state: AdamWState) -> Tensor:
    """One in-place AdamW update of ``param``; returns ``param``.

    Decay is applied first (``p <- p - lr*wd*p``), then the bias-corrected
    Adam step.
    """
    grad = np.asarray(grad)
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise ShapeError(f"adamw_step: param {param.shape}, grad {grad.shape}, "
                         f"moments {state.m.shape}/{state.v.shape} must match")
    p = param.data
    dt = p.dtype
    state.t += 1
    if state.weight_decay:
        p -= dt.type(state.lr * state.weight_decay) * p
    b1, b2 = state.beta1, state.beta2
    state.m *= dt.type(b1)
    state.m += dt.type(1 - b1) * grad
    state.v *= dt.type(b2)
    state.v += dt.type(1 - b2) * grad * grad
    mhat = state.m / dt.type(1 - b1 ** state.t)
    vhat = state.v / dt.type(1 - b2 ** state.t)
    p -= dt.type(state.lr) * mhat / (np.sqrt(vhat) + dt.type(state.eps))
    return param


@dataclass
class AdamW:
    """Joint optimizer over a named parameter set.

    ``decay`` selects which parameter names receive weight decay.
    """

    params: dict
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay: set = field(default_factory=set)
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.states:
                self.states[name] = AdamWState.like(
                    p, lr=self.lr, beta1=self.betas[0], beta2=self.betas[1], eps=self.eps,
                    weight_decay=self.weight_decay if name in self.decay else 0.0)

    def step(self, grads: dict) -> None:
        """``grads`` maps parameter tensors to gradient arrays."""
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            adamw_step(p, g, self.states[name])

    @property
    def t(self) -> int:
        return next(iter(self.states.values())).t if self.states else 0
