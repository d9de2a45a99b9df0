"""Differentiable building blocks used by the forecaster and its baselines."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor, _make, as_tensor, matmul, sigmoid, tanh


def linear(x, W, b=None) -> Tensor:
    """Affine map ``x @ W + b`` over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} incompatible with weight shape {W.shape}")
    if x.ndim == 1:
        y = matmul(x.reshape(1, -1), W).reshape(W.shape[1])
    else:
        y = matmul(x, W)
    return y if b is None else y + b


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gbeta = g.sum(axis=lead)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def _resolve_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.Philox(0 if rng is None else int(rng)))


def dropout(x, p: float, mode: str = "train", rng=None) -> Tensor:
    """Inverted dropout. ``rng`` is a Generator (consumed) or an integer seed."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    x = as_tensor(x)
    if mode == "eval" or p == 0.0:
        return x
    keep = _resolve_rng(rng).random(x.shape) >= p
    scale = keep / (1.0 - p)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def mse_loss(pred, target) -> Tensor:
    """Mean over every element of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def backward(g):
        gp = g * 2.0 * diff / n if pred.requires_grad else None
        gt = -g * 2.0 * diff / n if target.requires_grad else None
        return gp, gt

    return _make(out, (pred, target), backward)


ATTENTION_KEYS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")


def multi_head_attention(xq, xkv, params: Mapping[str, Tensor], n_heads: int) -> Tensor:
    """Scaled dot-product attention with separate query and key/value inputs.

    ``xq`` is ``[..., Tq, d]`` and ``xkv`` is ``[..., Tk, d]`` with matching
    leading dims. No mask is applied.
    """
    xq, xkv = as_tensor(xq), as_tensor(xkv)
    d = xq.shape[-1]
    if d % n_heads != 0:
        raise ConfigError(f"model width {d} is not divisible by n_heads={n_heads}")
    dh = d // n_heads
    lead = xq.shape[:-2]
    tq, tk = xq.shape[-2], xkv.shape[-2]

    def heads(t: Tensor, length: int) -> Tensor:
        # [..., L, d] -> [..., h, L, dh]
        nd = len(lead)
        t = t.reshape(lead + (length, n_heads, dh))
        return t.transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2))

    q = heads(linear(xq, params["w_q"], params["b_q"]), tq)
    k = heads(linear(xkv, params["w_k"], params["b_k"]), tk)
    v = heads(linear(xkv, params["w_v"], params["b_v"]), tk)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    nd = len(lead)
    ctx = ctx.transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2)).reshape(lead + (tq, d))
    return linear(ctx, params["w_o"], params["b_o"])


def multi_head_self_attention(x, params: Mapping[str, Tensor], n_heads: int) -> Tensor:
    """Bidirectional self-attention over the time axis of ``x`` ([B, T, d])."""
    return multi_head_attention(x, x, params, n_heads)


LSTM_KEYS = ("w_ih", "w_hh", "b", "w_head", "b_head")


def lstm_forward(x, params: Mapping[str, Tensor], hidden_size: int) -> Tensor:
    """Single-layer LSTM over ``x`` ([B, T, 1]); the last hidden state feeds an affine head.

    Gate columns in ``w_ih``/``w_hh``/``b`` are ordered input, forget, cell, output.
    """
    if hidden_size < 1:
        raise ConfigError(f"hidden_size must be >= 1, got {hidden_size}")
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != 1:
        raise ShapeError(f"lstm_forward expects [B, T, 1], got {x.shape}")
    B, T, _ = x.shape
    n = hidden_size
    h = Tensor(np.zeros((B, n)))
    c = Tensor(np.zeros((B, n)))
    # input contributions for all steps at once
    xin = linear(x, params["w_ih"], params["b"])
    for t in range(T):
        z = xin[:, t, :] + matmul(h, params["w_hh"])
        i = sigmoid(z[:, 0:n])
        f = sigmoid(z[:, n:2 * n])
        g = tanh(z[:, 2 * n:3 * n])
        o = sigmoid(z[:, 3 * n:4 * n])
        c = f * c + i * g
        h = o * tanh(c)
    return linear(h, params["w_head"], params["b_head"])
