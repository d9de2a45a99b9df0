"""The GateTS forecaster: embedding, Prepare Block, router, experts, head.

Pipeline for a batch of context windows ``x`` ([B, T]):

1. each scalar step is mapped to ``d_model`` features and a learnable
   positional row is added;
2. the Prepare Block (self-attention, dropout, residual, layer norm) mixes
   information across steps;
3. the router scores every token against every expert and keeps ``k``;
4. each expert (attention + norm + feed-forward + norm, with residuals) runs
   only on the tokens routed to it, and outputs are mixed with the sparse
   weights, followed by dropout and layer norm;
5. an affine head reads the last token and emits ``H`` values.

The LSTM baseline and the naive forecast also live here.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .gating import ROUTERS, RoutingDecision, gate_probabilities, gate_scores, topk_renormalize
from .nncore import Tensor, as_tensor, dropout, gelu, layer_norm, linear, lstm_forward
from .nncore.functional import multi_head_self_attention
from .nncore.tensor import scatter_add

ARCHITECTURES = ("gatets", "lstm")


def _check_keys(cls, data: Mapping) -> None:
    valid = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(valid))
    if unknown:
        raise ConfigError(
            f"unknown {cls.__name__} key(s) {', '.join(unknown)}; valid keys: {', '.join(valid)}"
        )


@dataclass(frozen=True)
class GateTSConfig:
    context: int = 64
    horizon: int = 48
    d_model: int = 48
    n_heads: int = 4
    experts: int = 16
    active: int = 2
    ffn_width: int = 48
    dropout: float = 0.1
    router: str = "attention"
    seed: int = 0

    def __post_init__(self):
        if self.context < 1 or self.horizon < 1:
            raise ConfigError(f"context and horizon must be >= 1, got {self.context}, {self.horizon}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if not 1 <= self.active <= self.experts:
            raise ConfigError(f"need 1 <= active <= experts, got active={self.active}, experts={self.experts}")
        if self.ffn_width < 1:
            raise ConfigError(f"ffn_width must be >= 1, got {self.ffn_width}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.router not in ROUTERS:
            raise ConfigError(f"router must be one of {', '.join(ROUTERS)}, got {self.router!r}")

    def to_dict(self) -> dict:
        return {"arch": "gatets", **dataclasses.asdict(self)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "GateTSConfig":
        data = {k: v for k, v in data.items() if k != "arch"}
        _check_keys(cls, data)
        return cls(**data)


@dataclass(frozen=True)
class LSTMConfig:
    context: int = 64
    horizon: int = 48
    hidden_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.context < 1 or self.horizon < 1 or self.hidden_size < 1:
            raise ConfigError("context, horizon and hidden_size must all be >= 1")

    def to_dict(self) -> dict:
        return {"arch": "lstm", **dataclasses.asdict(self)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "LSTMConfig":
        data = {k: v for k, v in data.items() if k != "arch"}
        _check_keys(cls, data)
        return cls(**data)


def config_from_dict(data: Mapping) -> GateTSConfig | LSTMConfig:
    arch = data.get("arch", "gatets")
    if arch == "gatets":
        return GateTSConfig.from_dict(data)
    if arch == "lstm":
        return LSTMConfig.from_dict(data)
    raise ConfigError(f"unknown arch {arch!r}; choose from {', '.join(ARCHITECTURES)}")


# -- initialization ---------------------------------------------------------
def _affine(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _attention_params(rng, d: int, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for proj in "qkvo":
        out[f"{prefix}.w_{proj}"] = _affine(rng, d, (d, d))
        out[f"{prefix}.b_{proj}"] = _affine(rng, d, (d,))
    return out


def _norm_params(d: int, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.gamma": np.ones(d), f"{prefix}.beta": np.zeros(d)}


def _router_params(rng, config: GateTSConfig) -> dict[str, np.ndarray]:
    d, E = config.d_model, config.experts
    if config.router == "attention":
        return {
            "router.w_k": _affine(rng, d, (d, d)),
            "router.b_k": _affine(rng, d, (d,)),
            "router.w_q": rng.normal(0.0, 0.02, size=(d, E)),
            "router.b_q": rng.normal(0.0, 0.02, size=(d,)),
            "router.w_e": _affine(rng, d * d, (d * d, E)),
        }
    if config.router == "hmm":
        return {
            "router.w": _affine(rng, d, (d, d)),
            "router.q": rng.normal(0.0, 0.02, size=(d, E)),
            "router.m": np.zeros(E),
        }
    return {
        "router.w_g": _affine(rng, d, (d, E)),
        "router.b_g": _affine(rng, d, (E,)),
    }


def init_params(config: GateTSConfig) -> dict[str, np.ndarray]:
    """Fresh parameters drawn from ``config.seed``; keys are dotted names."""
    rng = np.random.default_rng(config.seed)
    d, T, H, f = config.d_model, config.context, config.horizon, config.ffn_width
    p: dict[str, np.ndarray] = {
        "embed.w": _affine(rng, 1, (1, d)),
        "embed.b": _affine(rng, 1, (d,)),
        "embed.pos": rng.normal(0.0, 0.02, size=(T, d)),
    }
    p.update(_attention_params(rng, d, "prepare.attn"))
    p.update(_norm_params(d, "prepare.norm"))
    p.update(_router_params(rng, config))
    for e in range(config.experts):
        pre = f"experts.{e}"
        p.update(_attention_params(rng, d, f"{pre}.attn"))
        p.update(_norm_params(d, f"{pre}.norm1"))
        p[f"{pre}.ffn.w1"] = _affine(rng, d, (d, f))
        p[f"{pre}.ffn.b1"] = _affine(rng, d, (f,))
        p[f"{pre}.ffn.w2"] = _affine(rng, f, (f, d))
        p[f"{pre}.ffn.b2"] = _affine(rng, f, (d,))
        p.update(_norm_params(d, f"{pre}.norm2"))
    p.update(_norm_params(d, "combine.norm"))
    p["head.w"] = _affine(rng, d, (d, H))
    p["head.b"] = _affine(rng, d, (H,))
    return p


def expert_size(config: GateTSConfig) -> int:
    d, f = config.d_model, config.ffn_width
    attention = 4 * (d * d + d)
    norms = 2 * 2 * d
    ffn = d * f + f + f * d + d
    return attention + norms + ffn


def router_size(config: GateTSConfig) -> int:
    d, E = config.d_model, config.experts
    if config.router == "attention":
        return d * d + d + d * E + d + d * d * E
    if config.router == "hmm":
        return d * d + d * E + E
    return d * E + E


def count_parameters(config: GateTSConfig | LSTMConfig) -> tuple[int, int]:
    """(total, active) learnable scalars; active = shared parts plus ``k`` experts."""
    if isinstance(config, LSTMConfig):
        n, H = config.hidden_size, config.horizon
        total = 4 * n + 4 * n * n + 4 * n + n * H + H
        return total, total
    d, T, H = config.d_model, config.context, config.horizon
    shared = (
        2 * d                      # input projection
        + T * d                    # positional table
        + 4 * (d * d + d) + 2 * d  # Prepare Block
        + router_size(config)
        + 2 * d                    # combination norm
        + d * H + H                # head
    )
    per_expert = expert_size(config)
    return shared + config.experts * per_expert, shared + config.active * per_expert


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


class _Forecaster:
    """Shared parameter bookkeeping for the trainable models."""

    config: GateTSConfig | LSTMConfig
    params: dict[str, Tensor]

    def _wrap(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in arrays.items()}

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(arrays))
        extra = sorted(set(arrays) - set(self.params))
        if missing or extra:
            raise ShapeError(
                f"parameter names differ from the model: missing {missing[:5]}, unexpected {extra[:5]}"
            )
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"parameter {k!r}: checkpoint shape {v.shape} != model shape {self.params[k].shape}")
        for k, v in arrays.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _check_input(self, x) -> Tensor:
        x = as_tensor(x)
        T = self.config.context
        if x.ndim != 2 or x.shape[1] != T:
            raise ShapeError(f"expected context windows of shape [B, {T}], got {x.shape}")
        if not np.all(np.isfinite(x.data)):
            raise NumericError("input contains non-finite values")
        return x


class GateTS(_Forecaster):
    """Sparse mixture-of-experts forecaster."""

    def __init__(self, config: GateTSConfig, params: Mapping[str, np.ndarray] | None = None):
        self.config = config
        self._wrap(init_params(config))
        if params is not None:
            self.load_state_dict(params)
        p = self.params
        self._prepare_attn = _sub(p, "prepare.attn")
        self._router = _sub(p, "router")
        self._experts = [_sub(p, f"experts.{e}") for e in range(config.experts)]

    # -- stages -----------------------------------------------------------
    def embed_inputs(self, x) -> Tensor:
        """[B, T] -> [B, T, d]: scalar-to-vector affine map plus positional rows."""
        x = as_tensor(x)
        T = self.config.context
        if x.ndim != 2 or x.shape[1] != T:
            raise ShapeError(f"embedding expects context length {T}, got input shape {x.shape}")
        p = self.params
        B = x.shape[0]
        return linear(x.reshape(B, T, 1), p["embed.w"], p["embed.b"]) + p["embed.pos"]

    def prepare_block(self, h0, train: bool = False, rng=None) -> Tensor:
        p, cfg = self.params, self.config
        a = multi_head_self_attention(h0, self._prepare_attn, cfg.n_heads)
        a = dropout(a, cfg.dropout, _mode(train), rng)
        return layer_norm(h0 + a, p["prepare.norm.gamma"], p["prepare.norm.beta"])

    def route(self, h) -> RoutingDecision:
        scores = gate_scores(self.config.router, h, self._router)
        return topk_renormalize(gate_probabilities(scores), self.config.active)

    def _expert_tail(self, e: int, h, a, train: bool, rng) -> Tensor:
        """Everything after the expert's attention: residual, norms, feed-forward."""
        ep, cfg = self._experts[e], self.config
        a = dropout(a, cfg.dropout, _mode(train), rng)
        h1 = layer_norm(h + a, ep["norm1.gamma"], ep["norm1.beta"])
        f = linear(gelu(linear(h1, ep["ffn.w1"], ep["ffn.b1"])), ep["ffn.w2"], ep["ffn.b2"])
        f = dropout(f, cfg.dropout, _mode(train), rng)
        return layer_norm(h1 + f, ep["norm2.gamma"], ep["norm2.beta"])

    def expert_forward(self, h, e: int, train: bool = False, rng=None) -> Tensor:
        """Dense evaluation of expert ``e`` over every token of ``h`` ([B, T, d])."""
        if not 0 <= e < self.config.experts:
            raise IndexError(f"expert index {e} out of range for {self.config.experts} experts")
        h = as_tensor(h)
        a = multi_head_self_attention(h, _sub(self._experts[e], "attn"), self.config.n_heads)
        return self._expert_tail(e, h, a, train, rng)

    def expert_tokens(self, h, e: int, bi: np.ndarray, ti: np.ndarray, train: bool = False, rng=None) -> Tensor:
        """Expert ``e`` evaluated only at tokens ``(bi[n], ti[n])``; returns [N, d].

        Attention runs over the sequences that contain at least one routed
        token (keys and values need the whole context); the residual, norms
        and feed-forward run on the routed tokens alone.
        """
        h = as_tensor(h)
        seqs, inv = np.unique(bi, return_inverse=True)
        a = multi_head_self_attention(h[seqs], _sub(self._experts[e], "attn"), self.config.n_heads)
        return self._expert_tail(e, h[bi, ti], a[inv, ti], train, rng)

    def sparse_mixture(self, h, decision: RoutingDecision, train: bool = False, rng=None) -> Tensor:
        """Weighted expert sum computing each expert only where its weight is non-zero."""
        h = as_tensor(h)
        out = None
        for e in range(self.config.experts):
            bi, ti = np.nonzero(decision.mask[..., e])
            if len(bi) == 0:
                continue
            y = self.expert_tokens(h, e, bi, ti, train, rng)
            w = decision.weights[..., e][bi, ti].reshape(-1, 1)
            contrib = scatter_add(h.shape, (bi, ti), y * w)
            out = contrib if out is None else out + contrib
        return out

    def combine_experts(self, outputs, decision: RoutingDecision, train: bool = False, rng=None) -> Tensor:
        """Dense combination of full expert outputs, then dropout and layer norm."""
        if len(outputs) != self.config.experts:
            raise ShapeError(f"expected {self.config.experts} expert outputs, got {len(outputs)}")
        mixed = None
        for e, y in enumerate(outputs):
            term = y * decision.weights[..., e:e + 1]
            mixed = term if mixed is None else mixed + term
        return self._finish_mixture(mixed, train, rng)

    def _finish_mixture(self, mixed, train: bool, rng) -> Tensor:
        p = self.params
        mixed = dropout(mixed, self.config.dropout, _mode(train), rng)
        return layer_norm(mixed, p["combine.norm.gamma"], p["combine.norm.beta"])

    def forecast_head(self, hc) -> Tensor:
        """Affine readout of the last token: [B, T, d] -> [B, H]."""
        hc = as_tensor(hc)
        return linear(hc[:, -1, :], self.params["head.w"], self.params["head.b"])

    # -- full model -------------------------------------------------------
    def forward(self, x, train: bool = False, rng=None, dense: bool = False) -> tuple[Tensor, RoutingDecision]:
        """Forecast ``[B, H]`` (normalized units) plus the routing decision.

        ``dense=True`` evaluates every expert on every token and masks
        afterwards; it exists as a reference for the sparse path.
        """
        x = self._check_input(x)
        h = self.prepare_block(self.embed_inputs(x), train, rng)
        decision = self.route(h)
        if dense:
            outputs = [self.expert_forward(h, e, train, rng) for e in range(self.config.experts)]
            hc = self.combine_experts(outputs, decision, train, rng)
        else:
            hc = self._finish_mixture(self.sparse_mixture(h, decision, train, rng), train, rng)
        return self.forecast_head(hc), decision

    __call__ = forward


class LSTMForecaster(_Forecaster):
    """One-layer LSTM whose final hidden state feeds an affine head."""

    def __init__(self, config: LSTMConfig, params: Mapping[str, np.ndarray] | None = None):
        self.config = config
        self._wrap(self.init_params(config))
        if params is not None:
            self.load_state_dict(params)

    @staticmethod
    def init_params(config: LSTMConfig) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(config.seed)
        n, H = config.hidden_size, config.horizon
        b = _affine(rng, n, (4 * n,))
        b[n:2 * n] = 1.0  # forget gate
        return {
            "lstm.w_ih": _affine(rng, n, (1, 4 * n)),
            "lstm.w_hh": _affine(rng, n, (n, 4 * n)),
            "lstm.b": b,
            "lstm.w_head": _affine(rng, n, (n, H)),
            "lstm.b_head": _affine(rng, n, (H,)),
        }

    def forward(self, x, train: bool = False, rng=None, dense: bool = False) -> tuple[Tensor, None]:
        x = self._check_input(x)
        B, T = x.shape
        y = lstm_forward(x.reshape(B, T, 1), _sub(self.params, "lstm"), self.config.hidden_size)
        return y, None

    __call__ = forward


def build_model(config: GateTSConfig | LSTMConfig, params: Mapping[str, np.ndarray] | None = None):
    if isinstance(config, LSTMConfig):
        return LSTMForecaster(config, params)
    return GateTS(config, params)


def naive_forecast(x, H: int) -> np.ndarray:
    """Repeat the last observed value ``H`` times."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ShapeError(f"naive_forecast needs a non-empty 1-D series, got shape {x.shape}")
    if H < 1:
        raise ConfigError(f"horizon must be >= 1, got {H}")
    return np.full(H, x[-1])


def _mode(train: bool) -> str:
    return "train" if train else "eval"
