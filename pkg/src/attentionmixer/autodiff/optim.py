from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamaxState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    u: list[np.ndarray] = field(default_factory=list)


class Adamax:
    """Adam with an infinity-norm second moment.

    Update per parameter, with ``g`` its gradient::

        m <- b1*m + (1-b1)*g
        u <- max(b2*u, |g|)
        theta <- theta - lr / (1 - b1**t) * m / (u + eps)

    Parameters whose ``grad`` is None (unused in the last graph) are skipped.
    """

    def __init__(self, params: Iterable[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] <= 1.0):
            raise ValueError(f"invalid betas {betas}")
        self.state = AdamaxState(
            lr=lr,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            m=[np.zeros_like(p.data) for p in self.params],
            u=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamax_step(self.params, self.state)


def adamax_step(params: list[Tensor], state: AdamaxState) -> None:
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer state does not match the parameter list")
    if params and all(p.grad is None for p in params):
        raise MissingGradientError("adamax step before backward(): no parameter has a gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1**state.t)
    for p, m, u in zip(params, state.m, state.u):
        g = p.grad
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        np.maximum(b2 * u, np.abs(g), out=u)
        p.data -= (step_size * m / (u + state.eps)).astype(p.dtype, copy=False)
