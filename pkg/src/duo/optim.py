"""Adam and the inverse-square-root warmup schedule."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, frozen_rows=None):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays; a missing or ``None``
    gradient counts as zero. Returns the updated parameter arrays (new
    objects) and advances ``state.t`` by one. ``frozen_rows`` maps a name to
    row indices that must never move (the padding row of a table).
    """
    frozen_rows = frozen_rows or {}
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ContractError(f"adam: gradient {g.shape} for parameter {name} {p.shape}")
        if name in frozen_rows:
            g = g.copy()
            g[frozen_rows[name]] = 0
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - update).astype(p.dtype)
    return out, state


class Adam:
    """Stateful wrapper updating :class:`~duo.autodiff.Tensor` parameters in place."""

    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9, frozen_rows=None):
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.state = AdamState(beta1, beta2, eps)
        self.frozen_rows = dict(frozen_rows or {})

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        arrays = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items()}
        new, _ = adam_step(arrays, grads, self.state, lr, self.frozen_rows)
        for n, p in self.params.items():
            p.data = new[n]

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    """``d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ContractError("lr_schedule: step counts from 1")
    if warmup < 1:
        raise ContractError("lr_schedule: warmup must be >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)
