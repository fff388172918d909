"""Central finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tape, Tensor


def numeric_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                 indices=None) -> np.ndarray:
    """Central differences of ``f`` with respect to entries of ``param``.

    ``param.data`` is perturbed in place and restored afterwards.
    """
    flat_idx = range(param.data.size) if indices is None else indices
    out = np.zeros(param.data.size, dtype=np.float64)
    base = param.data.copy()
    work = base.copy()
    try:
        for i in flat_idx:
            orig = work.flat[i]
            work.flat[i] = orig + h
            param.data = work
            fp = float(f().data)
            work.flat[i] = orig - h
            param.data = work
            fm = float(f().data)
            work.flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective while perturbing entry {i}")
            out[i] = (fp - fm) / (2 * h)
    finally:
        param.data = base
    return out.reshape(param.shape)


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      max_entries: int | None = None, rng=None) -> float:
    """Max elementwise relative error between backward() and central differences.

    ``f`` rebuilds the graph from ``params`` on every call.  With
    ``max_entries`` set, at most that many randomly chosen entries per
    parameter are compared.
    """
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is not finite at the check point")
    tape.backward(loss, params)
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for p in params:
        analytic = p.grad
        if max_entries is not None and p.data.size > max_entries:
            idx = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        else:
            idx = np.arange(p.data.size)
        numeric = numeric_grad(f, p, h, idx).reshape(-1)[idx]
        err = relative_error(analytic.reshape(-1)[idx], numeric)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
