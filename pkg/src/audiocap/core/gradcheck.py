"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from audiocap.core.tensor import Tensor, no_grad


class NumericError(ArithmeticError):
    """A function produced a non-finite value where a finite one was required."""


def _scalar(value: Tensor) -> float:
    v = float(np.asarray(value.data).reshape(()))
    if not np.isfinite(v):
        raise NumericError(f"function value is not finite: {v}")
    return v


def grad_check(fn: Callable[[Tensor], Tensor], point, epsilon: float = 1e-6) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|).

    ``fn`` maps a Tensor shaped like ``point`` to a scalar Tensor.
    """
    if not 1e-8 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-8, 1e-3], got {epsilon}")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    _scalar(out)
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = _scalar(fn(Tensor(x0)))
            flat[i] = orig - epsilon
            f_minus = _scalar(fn(Tensor(x0)))
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * epsilon)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn: Callable[[dict], Tensor], params, epsilon: float = 1e-6) -> float:
    """``grad_check`` over every entry of a named parameter dict at once.

    ``loss_fn`` receives the dict of Tensors and returns a scalar Tensor.
    """
    names = list(params)
    shapes = [params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]
    point = np.concatenate([params[n].data.reshape(-1) for n in names])

    def packed(flat: Tensor) -> Tensor:
        view = {}
        offset = 0
        for name, shape, size in zip(names, shapes, sizes):
            view[name] = flat[offset: offset + size].reshape(shape)
            offset += size
        return loss_fn(view)

    return grad_check(packed, point, epsilon)
