"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-3,
    float64: bool = False,
) -> float:
    """Max relative error between analytic and central finite-difference grads.

    ``f`` must map a tensor to a scalar and be smooth near ``x``.  Returns
    max over coordinates of |g_analytic - g_fd| / max(1, |g_fd|).  Set
    ``float64`` to re-evaluate in double precision when 32-bit rounding
    dominates.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    dtype = np.float64 if float64 else np.float32
    base = data.astype(dtype)

    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = probe.grad.reshape(-1).astype(np.float64)

    flat = base.reshape(-1)
    fd = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        f_plus = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] = flat[i] - eps
        f_minus = f(Tensor(bumped.reshape(base.shape))).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"grad_check: non-finite f at coordinate {i}")
        fd[i] = (f_plus - f_minus) / (2.0 * eps)

    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    return float(rel.max()) if rel.size else 0.0
