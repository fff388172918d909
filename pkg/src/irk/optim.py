"""AdamW with decoupled weight decay and a linear warmup schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamWState":
        st = cls(**hyper)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adamw_step(state: AdamWState, params: Sequence[Tensor], grads=None, lr: float | None = None):
    """One AdamW update, in place on ``params``.

    ``grads`` defaults to each parameter's ``.grad``.  Nothing is modified
    if any gradient is non-finite.
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(g) != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient {np.shape(g)} / moment {m.shape} vs parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient; step aborted")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=p.dtype)
        m = state.beta1 * state.m[i] + (1 - state.beta1) * g
        v = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        state.m[i], state.v[i] = m.astype(p.dtype), v.astype(p.dtype)
        theta = p.data
        if state.weight_decay:
            theta = theta - lr * state.weight_decay * theta
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = (theta - lr * update).astype(p.dtype)
        new.setflags(write=False)
        p.data = new
    return params


def warmup_lr(step: int, base_lr: float = 1e-5, start_lr: float = 1e-7,
              warmup_steps: int = 1000) -> float:
    """Linear warmup from ``start_lr`` to ``base_lr``, constant afterwards."""
    if warmup_steps < 0:
        raise ContractError("warmup_steps must be >= 0")
    if warmup_steps == 0 or step >= warmup_steps:
        return base_lr
    return start_lr + (base_lr - start_lr) * step / warmup_steps
