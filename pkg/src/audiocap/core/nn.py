"""Layer building blocks shared by the embedder and the captioner.

Parameters live in plain ordered dicts of ``Tensor`` keyed by dotted names, so
a model is (config, params) and a checkpoint is just the params' arrays.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from audiocap.core import tensor as T
from audiocap.core.tensor import Tensor


def init_linear(params, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                zero: bool = False, bias: bool = True) -> None:
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
    params[f"{name}.weight"] = Tensor(w, requires_grad=True)
    if bias:
        params[f"{name}.bias"] = Tensor(np.zeros(n_out), requires_grad=True)


def init_layer_norm(params, name: str, dim: int) -> None:
    params[f"{name}.gain"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(dim), requires_grad=True)


def linear(params, name: str, x) -> Tensor:
    out = T.matmul(x, params[f"{name}.weight"])
    b = params.get(f"{name}.bias")
    return out if b is None else out + b


def layer_norm(params, name: str, x, eps: float = 1e-5) -> Tensor:
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axis=-1, keepdims=True)
    return xc * T.power(var + eps, -0.5) * params[f"{name}.gain"] + params[f"{name}.bias"]


def init_attention(params, name: str, dim: int, rng: np.random.Generator) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{proj}", dim, dim, rng)


def attention(params, name: str, x, memory, n_heads: int,
              mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``x`` is (B, Tq, d), ``memory`` is (B, Tk, d). ``mask`` is an additive
    constant broadcastable to (B, heads, Tq, Tk) (0 keeps, -inf-ish drops).
    """
    b, tq, d = x.shape
    tk = memory.shape[1]
    dh = d // n_heads

    def split(t, n):
        return t.reshape(b, n, n_heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(params, f"{name}.q", x), tq)
    k = split(linear(params, f"{name}.k", memory), tk)
    v = split(linear(params, f"{name}.v", memory), tk)
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, tq, d)
    return linear(params, f"{name}.o", ctx)


def init_mlp(params, name: str, dim: int, hidden: int, rng: np.random.Generator) -> None:
    init_linear(params, f"{name}.fc1", dim, hidden, rng)
    init_linear(params, f"{name}.fc2", hidden, dim, rng)


def mlp(params, name: str, x) -> Tensor:
    return linear(params, f"{name}.fc2", T.gelu(linear(params, f"{name}.fc1", x)))


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -1e9), k=1)


def param_arrays(params) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.data) for k, v in params.items())


def params_from_arrays(arrays) -> "OrderedDict[str, Tensor]":
    return OrderedDict((k, Tensor(np.array(v, dtype=np.float64), requires_grad=True))
                       for k, v in arrays.items())


def collect_grads(params) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict(
        (k, v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in params.items()
    )


def zero_grads(params) -> None:
    for v in params.values():
        v.grad = None
