"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    k: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamWState) -> list[np.ndarray]:
    """One AdamW update; returns new parameter arrays and advances ``state``.

    Decay is applied first (``theta -= lr * wd * theta``), then the
    bias-corrected Adam step.
    """
    if state.lr <= 0:
        raise ValueError("lr must be positive")
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    if not state.m:
        state.m = [np.zeros(p.shape, np.float64) for p in params]
        state.v = [np.zeros(p.shape, np.float64) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient")

    state.k += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.k
    c2 = 1.0 - b2 ** state.k
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g64 = g.astype(np.float64)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g64
        state.v[i] = b2 * state.v[i] + (1 - b2) * g64 * g64
        theta = p.astype(np.float64)
        if state.weight_decay:
            theta = theta - state.lr * state.weight_decay * theta
        theta = theta - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        out.append(theta.astype(p.dtype))
    return out


class AdamW:
    """Stateful wrapper that updates :class:`Tensor` parameters in place."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def step(self, grads: list[np.ndarray]) -> None:
        new = adamw_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = d
