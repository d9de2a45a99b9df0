"""Numerical self-checks: gradients, gate equivalence, top-k sparsity, sparse=dense.

Used by ``gatets selfcheck`` and by the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .gating import attention_gate_scores, classic_gate_scores, hmm_gate_scores, topk_renormalize
from .moe import GateTS, GateTSConfig
from .nncore import (
    Tensor,
    dropout,
    layer_norm,
    linear,
    lstm_forward,
    mse_loss,
    multi_head_self_attention,
    no_grad,
    softmax,
)
from .nncore import gradcheck as gc

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<40} {self.value:.3e} <= {self.tolerance:.0e}  ({self.seconds:.2f}s)"


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _attn_params(rng, d: int) -> dict[str, Tensor]:
    return {k: _t(rng, d, d) if k.startswith("w") else _t(rng, d) for k in
            ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")}


def gradient_cases(seed: int) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Differentiable operations at small random shapes, keyed by name."""
    rng = np.random.default_rng(seed)
    cases = {}

    x, W, b = _t(rng, 3, 3), _t(rng, 3, 2), _t(rng, 2)
    cases["linear"] = (lambda x=x, W=W, b=b: linear(x, W, b), [x, W, b])

    s = _t(rng, 2, 5)
    cases["softmax"] = (lambda s=s: softmax(s, axis=-1), [s])

    xl, g, be = _t(rng, 2, 4), _t(rng, 4), _t(rng, 4)
    cases["layer_norm"] = (lambda xl=xl, g=g, be=be: layer_norm(xl, g, be), [xl, g, be])

    xa, pa = _t(rng, 1, 3, 4), _attn_params(rng, 4)
    cases["multi_head_self_attention"] = (
        lambda xa=xa, pa=pa: multi_head_self_attention(xa, pa, 2), [xa, *pa.values()])

    xd = _t(rng, 3, 4)
    cases["dropout(train, fixed seed)"] = (lambda xd=xd: dropout(xd, 0.3, "train", rng=seed), [xd])

    pr, tg = _t(rng, 2, 3), _t(rng, 2, 3)
    cases["mse_loss"] = (lambda pr=pr, tg=tg: mse_loss(pr, tg), [pr, tg])

    n = 4
    xs = _t(rng, 1, 3, 1)
    pl = {"w_ih": _t(rng, 1, 4 * n), "w_hh": _t(rng, n, 4 * n) * 0.5, "b": _t(rng, 4 * n),
          "w_head": _t(rng, n, 2), "b_head": _t(rng, 2)}
    pl = {k: Tensor(v.data) for k, v in pl.items()}
    cases["lstm_forward"] = (lambda xs=xs, pl=pl: lstm_forward(xs, pl, n), [xs, *pl.values()])

    d, E, T = 3, 4, 5
    xg = _t(rng, 1, T, d)
    att = {"w_k": _t(rng, d, d), "b_k": _t(rng, d), "w_q": _t(rng, d, E), "b_q": _t(rng, d),
           "w_e": _t(rng, d * d, E)}
    cases["attention_gate_scores"] = (lambda xg=xg, att=att: attention_gate_scores(xg, att), [xg, *att.values()])
    hmm = {"w": _t(rng, d, d), "q": _t(rng, d, E), "m": _t(rng, E)}
    cases["hmm_gate_scores"] = (lambda xg=xg, hmm=hmm: hmm_gate_scores(xg, hmm), [xg, *hmm.values()])
    cls = {"w_g": _t(rng, d, E), "b_g": _t(rng, E)}
    cases["classic_gate_scores"] = (lambda xg=xg, cls=cls: classic_gate_scores(xg, cls), [xg, *cls.values()])

    P = softmax(_t(rng, 2, 3, 5)).data
    pt = Tensor(P)
    cases["topk_renormalize"] = (lambda pt=pt: topk_renormalize(pt, 2).weights, [pt])
    return cases


def model_gradient_case(seed: int, router: str = "attention"):
    """Toy-scale GateTS (T=6, H=2, d=4, E=3, k=2, 2 heads) and all its inputs."""
    cfg = GateTSConfig(context=6, horizon=2, d_model=4, n_heads=2, experts=3, active=2, ffn_width=4,
                       dropout=0.0, router=router, seed=seed)
    model = GateTS(cfg)
    x = Tensor(np.random.default_rng(1000 + seed).standard_normal((2, cfg.context)))
    return (lambda: model(x)[0]), [*model.parameters().values(), x]


def gradient_suite(seeds: Iterable[int] = range(5), perturb: float = 0.0) -> list[CheckResult]:
    """Worst FD relative error per operation (over ``seeds``) and for the toy model.

    ``perturb`` scales analytic gradients by ``1 + perturb``; it exists so the
    suite can be shown to catch a broken backward pass.
    """
    seeds = list(seeds)
    worst: dict[str, float] = {}
    elapsed: dict[str, float] = {}
    for seed in seeds:
        items = list(gradient_cases(seed).items())
        for router in ("attention", "hmm", "classic"):
            items.append((f"GateTS model ({router} router)", model_gradient_case(seed, router)))
        for name, (fn, inputs) in items:
            t0 = time.perf_counter()
            err = _check(fn, inputs, seed, perturb)
            elapsed[name] = elapsed.get(name, 0.0) + time.perf_counter() - t0
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"grad {k}", v, GRAD_TOL, elapsed[k]) for k, v in worst.items()]


def _check(fn, inputs, seed: int, perturb: float) -> float:
    return gc.gradient_check(fn, inputs, h=1e-5, seed=seed, perturb=perturb)


def gate_equivalence(n_configs: int = 100, seed: int = 0) -> CheckResult:
    """Max |kron-path - bilinear-path| attention-gate score over random configs."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    with no_grad():
        for _ in range(n_configs):
            d, E = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            B, T = int(rng.integers(1, 4)), int(rng.integers(1, 7))
            params = {"w_k": _t(rng, d, d), "b_k": _t(rng, d), "w_q": _t(rng, d, E), "b_q": _t(rng, d),
                      "w_e": _t(rng, d * d, E)}
            X = _t(rng, B, T, d)
            a = attention_gate_scores(X, params, method="kron").data
            b = attention_gate_scores(X, params, method="bilinear").data
            worst = max(worst, float(np.max(np.abs(a - b))))
    return CheckResult(f"kron == bilinear ({n_configs} configs)", worst, 1e-10, time.perf_counter() - t0)


def topk_properties(n_rows: int = 1000, max_experts: int = 8, seed: int = 0) -> list[CheckResult]:
    """Exact-k sparsity, unit sum and survivor-ratio preservation on random simplex rows."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    sparsity = sums = ratios = 0.0
    for E in range(1, max_experts + 1):
        P = rng.dirichlet(np.ones(E), size=n_rows)
        for k in range(1, E + 1):
            dec = topk_renormalize(P, k)
            w = dec.weights.data
            sparsity = max(sparsity, float(np.max(np.abs((w != 0).sum(axis=-1) - k))))
            sums = max(sums, float(np.max(np.abs(w.sum(axis=-1) - 1.0))))
            sel = dec.selected
            ws = np.take_along_axis(w, sel, axis=-1)
            ps = np.take_along_axis(P, sel, axis=-1)
            # ratio of every survivor to the row's top survivor
            r = np.abs(ws / ws[:, :1] - ps / ps[:, :1])
            ratios = max(ratios, float(r.max()))
    dt = time.perf_counter() - t0
    return [
        CheckResult("top-k exactly k non-zeros", sparsity, 0.0, dt),
        CheckResult("top-k weights sum to 1", sums, 1e-6, 0.0),
        CheckResult("top-k survivor ratios preserved", ratios, 1e-9, 0.0),
    ]


def sparse_dense(n_configs: int = 10, seed: int = 0) -> CheckResult:
    """Max |sparse - dense| model output over random configs and inputs."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    routers = ("attention", "hmm", "classic")
    with no_grad():
        for i in range(n_configs):
            heads = int(rng.choice([1, 2]))
            E = int(rng.integers(2, 7))
            cfg = GateTSConfig(
                context=int(rng.integers(3, 10)), horizon=int(rng.integers(1, 5)),
                d_model=heads * int(rng.integers(2, 5)), n_heads=heads, experts=E,
                active=int(rng.integers(1, E + 1)), ffn_width=int(rng.integers(2, 9)),
                dropout=0.1, router=routers[i % 3], seed=i,
            )
            model = GateTS(cfg)
            x = rng.standard_normal((int(rng.integers(1, 6)), cfg.context))
            a = model(x, dense=False)[0].data
            b = model(x, dense=True)[0].data
            worst = max(worst, float(np.max(np.abs(a - b))))
    return CheckResult(f"sparse == dense ({n_configs} configs)", worst, 1e-12, time.perf_counter() - t0)


def run_all(perturb: float = 0.0, seeds: Iterable[int] = range(5)) -> list[CheckResult]:
    results = gradient_suite(seeds, perturb)
    results.append(gate_equivalence())
    results.extend(topk_properties())
    results.append(sparse_dense())
    return results
