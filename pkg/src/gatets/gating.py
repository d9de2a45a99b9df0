"""Routers mapping token representations to sparse expert weights.

Three scoring functions share one pipeline: scores -> softmax over experts ->
top-k mask -> renormalization of the surviving probabilities.

* ``attention``: keys ``K = X W_k + b_k`` meet learnable expert queries
  ``EQ`` through a Kronecker lift ``K (x) EQ[:, e]`` projected by ``W_e``.
* ``hmm``: scaled dot product of ``Z = X W`` with queries ``Q`` plus a
  learnable log-prior ``m`` per expert.
* ``classic``: one linear layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, ShapeError
from .nncore import Tensor, as_tensor, linear, softmax
from .nncore.tensor import matmul

ROUTERS = ("attention", "hmm", "classic")


@dataclass
class RoutingDecision:
    """Per-token routing.

    ``probs`` and ``weights`` are ``[..., E]`` tensors (``weights`` carries the
    gradient path); ``mask`` is a 0/1 array and ``selected`` holds the ``k``
    chosen expert indices per token in descending-probability order.
    """

    probs: Tensor
    mask: np.ndarray
    weights: Tensor
    selected: np.ndarray

    @property
    def k(self) -> int:
        return self.selected.shape[-1]

    @property
    def n_experts(self) -> int:
        return self.mask.shape[-1]


def kron(u, v) -> np.ndarray:
    """Row-major flattened outer product: ``out[i * d + j] = u[i] * v[j]``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"kron expects two vectors of equal length, got {u.shape} and {v.shape}")
    return np.outer(u, v).reshape(-1)


def expert_queries(params: Mapping[str, Tensor]) -> Tensor:
    """``EQ = W_q + b_q`` with ``b_q`` ([d]) broadcast across the expert columns."""
    return params["w_q"] + params["b_q"].reshape(-1, 1)


def attention_gate_scores(X, params: Mapping[str, Tensor], method: str = "bilinear") -> Tensor:
    """Attention-inspired gate logits ``[..., E]``.

    ``method="kron"`` materializes the ``d^2``-wide lifted features per token and
    expert; ``method="bilinear"`` folds ``W_e[:, e]`` into a ``d x d`` matrix and
    contracts it with the query first, which is algebraically identical and
    costs ``O(d^2 E)`` instead of ``O(T d^2 E)``.
    """
    X = as_tensor(X)
    W_k, W_e = params["w_k"], params["w_e"]
    d = W_k.shape[0]
    if X.shape[-1] != d:
        raise ShapeError(f"gate input width {X.shape[-1]} != key projection width {d}")
    EQ = expert_queries(params)
    E = EQ.shape[1]
    if W_e.shape != (d * d, E):
        raise ShapeError(f"W_e must be ({d * d}, {E}), got {W_e.shape}")
    K = linear(X, W_k, params["b_k"])
    scale = 1.0 / np.sqrt(d)
    if method == "kron":
        lead = K.shape[:-1]
        # Z[..., i, j, e] = K[..., i] * EQ[j, e], flattened over (i, j)
        Z = K.reshape(lead + (d, 1, 1)) * EQ.reshape((1,) * len(lead) + (1, d, E))
        Z = Z.reshape(lead + (d * d, E))
        return (Z * W_e).sum(axis=-2) * scale
    if method == "bilinear":
        # A[i, e] = sum_j W_e[i*d + j, e] * EQ[j, e]
        A = (W_e.reshape(d, d, E) * EQ.reshape(1, d, E)).sum(axis=1)
        return matmul(K, A) * scale
    raise ConfigError(f"unknown scoring method {method!r}; expected 'kron' or 'bilinear'")


def hmm_gate_scores(X, params: Mapping[str, Tensor]) -> Tensor:
    """``(X W) Q / sqrt(d) + m``."""
    X = as_tensor(X)
    W, Q, m = params["w"], params["q"], params["m"]
    if X.shape[-1] != W.shape[0]:
        raise ShapeError(f"gate input width {X.shape[-1]} incompatible with embedding map {W.shape}")
    d = W.shape[1]
    if Q.shape[0] != d or m.shape != (Q.shape[1],):
        raise ShapeError(f"query matrix {Q.shape} / log-prior {m.shape} inconsistent with width {d}")
    Z = linear(X, W)
    return matmul(Z, Q) * (1.0 / np.sqrt(d)) + m


def classic_gate_scores(X, params: Mapping[str, Tensor]) -> Tensor:
    return linear(X, params["w_g"], params["b_g"])


SCORE_FUNCTIONS = {
    "attention": attention_gate_scores,
    "hmm": hmm_gate_scores,
    "classic": classic_gate_scores,
}


def gate_scores(kind: str, X, params: Mapping[str, Tensor]) -> Tensor:
    try:
        fn = SCORE_FUNCTIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown router {kind!r}; choose from {', '.join(ROUTERS)}") from None
    return fn(X, params)


def gate_probabilities(S) -> Tensor:
    return softmax(S, axis=-1)


def topk_renormalize(P, k: int) -> RoutingDecision:
    """Keep each token's ``k`` largest probabilities and rescale them to sum to one.

    Ties go to the lower expert index. Gradients reach only surviving entries.
    """
    P = as_tensor(P)
    E = P.shape[-1]
    if not 1 <= k <= E:
        raise ConfigError(f"top-k requires 1 <= k <= {E}, got k={k}")
    # stable sort on the negated values keeps lower indices first among equals
    order = np.argsort(-P.data, axis=-1, kind="stable")
    selected = order[..., :k]
    mask = np.zeros(P.shape, dtype=P.data.dtype)
    np.put_along_axis(mask, selected, 1.0, axis=-1)
    if k == E:
        # rows are already on the simplex; skip the division so weights == probs bitwise
        return RoutingDecision(probs=P, mask=mask, weights=P, selected=selected)
    kept = P * mask
    weights = kept / kept.sum(axis=-1, keepdims=True)
    return RoutingDecision(probs=P, mask=mask, weights=weights, selected=selected)


def route(kind: str, X, params: Mapping[str, Tensor], k: int) -> RoutingDecision:
    return topk_renormalize(gate_probabilities(gate_scores(kind, X, params)), k)
