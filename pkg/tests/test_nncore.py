import math

import numpy as np
import pytest
from conftest import fd_grad, rel_err

from gatets.errors import ConfigError, NumericError, ShapeError
from gatets.nncore import (
    OptimizerState,
    ScheduleState,
    Tensor,
    adamw_step,
    cosine_lr,
    dropout,
    layer_norm,
    linear,
    lstm_forward,
    mse_loss,
    multi_head_self_attention,
    no_grad,
    softmax,
)
from gatets.nncore.gradcheck import gradient_check
from gatets.nncore.tensor import concatenate, gelu, index_add, scatter_add, stack


def T(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- linear -----------------------------------------------------------------
def test_linear_hand_cases():
    assert np.array_equal(linear(T([1, 0]), T([[2, 0], [0, 3]]), T([0, 0])).data, [2, 0])
    assert np.array_equal(linear(T([1, 1]), T([[1, 2], [3, 4]]), T([1, 1])).data, [5, 7])


def test_linear_weight_gradient_matches_fd():
    r = np.random.default_rng(7)
    x, W, b = T(r.standard_normal((4, 3))), T(r.standard_normal((3, 2))), T(r.standard_normal(2))
    linear(x, W, b).sum().backward()
    num = fd_grad(lambda: linear(x.data, W.data, b.data).data.sum(), W.data)
    assert rel_err(W.grad, num) < 1e-6


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 5\).*\(3, 2\)|\(3, 2\).*\(2, 5\)"):
        linear(T(np.ones((2, 5))), T(np.ones((3, 2))))


# -- softmax ----------------------------------------------------------------
def test_softmax_cases():
    assert np.allclose(softmax(T([0.0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)
    assert np.abs(softmax(T([1000.0, 0, 0])).data - [1, 0, 0]).max() < 1e-12
    assert np.allclose(softmax(T([math.log(2), 0.0, 0.0])).data, [0.5, 0.25, 0.25], atol=1e-15)


def test_softmax_rows_on_simplex(rng):
    p = softmax(T(rng.standard_normal((50, 7)) * 30)).data
    assert p.min() >= 0 and np.abs(p.sum(-1) - 1).max() < 1e-9


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        softmax(T([0.0, np.nan]))


# -- layer norm -------------------------------------------------------------
def test_layer_norm_cases():
    one, zero = T(np.ones(3)), T(np.zeros(3))
    assert np.array_equal(layer_norm(T([1.0, 1, 1]), one, zero).data, [0, 0, 0])
    out = layer_norm(T([-1.0, 1.0]), T(np.ones(2)), T(np.zeros(2)), eps=1e-15).data
    assert np.allclose(out, [-1, 1], atol=1e-12)


def test_layer_norm_row_statistics(rng):
    x = rng.standard_normal((20, 16)) * 10 + 3
    out = layer_norm(T(x), T(np.ones(16)), T(np.zeros(16))).data
    assert np.abs(out.mean(-1)).max() < 1e-9
    # the output variance is exactly var / (var + eps): within 1e-6 of 1 once var >= 10
    s2 = x.var(-1)
    assert np.allclose(out.var(-1), s2 / (s2 + 1e-5), rtol=0, atol=1e-12)
    assert np.abs(out.var(-1) - 1).max() < 1e-6


def test_layer_norm_gradient_matches_fd():
    r = np.random.default_rng(11)
    x, g, b = T(r.standard_normal((2, 4))), T(r.standard_normal(4)), T(r.standard_normal(4))
    w = r.standard_normal((2, 4))
    (layer_norm(x, g, b) * Tensor(w)).sum().backward()
    for t in (x, g, b):
        num = fd_grad(lambda: float((layer_norm(x.data, g.data, b.data).data * w).sum()), t.data)
        assert rel_err(t.grad, num) < 1e-5


# -- attention --------------------------------------------------------------
def _attn_params(r, d):
    return {k: T(r.standard_normal((d, d)) if k.startswith("w") else r.standard_normal(d))
            for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")}


def test_attention_single_token_is_value_then_output_projection(rng):
    p = _attn_params(rng, 4)
    x = rng.standard_normal((2, 1, 4))
    v = x @ p["w_v"].data + p["b_v"].data
    expected = v @ p["w_o"].data + p["b_o"].data
    assert np.allclose(multi_head_self_attention(T(x), p, 2).data, expected, atol=1e-12)


def test_attention_identical_tokens_give_identical_outputs(rng):
    p = _attn_params(rng, 4)
    x = np.repeat(rng.standard_normal((1, 1, 4)), 5, axis=1)
    out = multi_head_self_attention(T(x), p, 2).data
    assert np.allclose(out, out[:, :1], atol=1e-12)


def test_attention_matches_loop_oracle(rng):
    d, heads, Tn = 6, 3, 4
    p = _attn_params(rng, d)
    x = rng.standard_normal((2, Tn, d))
    pd = {k: v.data for k, v in p.items()}
    dh = d // heads
    expected = np.zeros_like(x)
    for b in range(2):
        q = x[b] @ pd["w_q"] + pd["b_q"]
        k = x[b] @ pd["w_k"] + pd["b_k"]
        v = x[b] @ pd["w_v"] + pd["b_v"]
        ctx = np.zeros((Tn, d))
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(Tn):
                s = np.array([q[i, sl] @ k[j, sl] for j in range(Tn)]) / math.sqrt(dh)
                w = np.exp(s - s.max())
                w /= w.sum()
                ctx[i, sl] = sum(w[j] * v[j, sl] for j in range(Tn))
        expected[b] = ctx @ pd["w_o"] + pd["b_o"]
    assert np.allclose(multi_head_self_attention(T(x), p, heads).data, expected, atol=1e-12)


def test_attention_gradient_matches_fd():
    r = np.random.default_rng(3)
    p = _attn_params(r, 4)
    x = T(r.standard_normal((1, 3, 4)))
    w = r.standard_normal((1, 3, 4))
    (multi_head_self_attention(x, p, 2) * Tensor(w)).sum().backward()

    def f():
        with no_grad():
            return float((multi_head_self_attention(Tensor(x.data), p, 2).data * w).sum())

    scale = np.sqrt(sum(np.sum(t.grad ** 2) for t in (x, *p.values())))
    for t in (x, *p.values()):
        num = fd_grad(f, t.data)
        # the key bias has an exactly-zero true gradient; compare it on the overall scale
        denom = max(np.linalg.norm(t.grad), np.linalg.norm(num), 1e-3 * scale)
        assert np.linalg.norm(t.grad - num) / denom < 1e-4


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        multi_head_self_attention(T(np.ones((1, 2, 5))), _attn_params(np.random.default_rng(0), 5), 2)


# -- dropout ----------------------------------------------------------------
def test_dropout_identity_cases(rng):
    x = T(rng.standard_normal((4, 5)))
    assert np.array_equal(dropout(x, 0.0, "train", 1).data, x.data)
    for p in (0.0, 0.3, 0.9):
        assert np.array_equal(dropout(x, p, "eval", 1).data, x.data)


def test_dropout_is_unbiased_in_expectation():
    x = np.linspace(-1, 2, 8)
    draws = np.stack([dropout(T(x, False), 0.5, "train", rng=s).data for s in range(10_000)])
    assert np.all(np.abs(draws.mean(0) - x) <= 0.02 * np.abs(x).max())


def test_dropout_fixed_seed_is_deterministic():
    x = T(np.ones(100), False)
    assert np.array_equal(dropout(x, 0.4, "train", 9).data, dropout(x, 0.4, "train", 9).data)


@pytest.mark.parametrize("p", [1.0, -0.1])
def test_dropout_rejects_bad_probability(p):
    with pytest.raises(ConfigError):
        dropout(T([1.0]), p)


# -- mse --------------------------------------------------------------------
def test_mse_cases_and_gradient(rng):
    assert mse_loss(T([[1.0, 2.0]]), T([[1.0, 2.0]])).data == 0
    assert mse_loss(T([[0.0, 0.0]]), T([[1.0, 1.0]])).data == 1
    pred, tgt = T(rng.standard_normal((3, 4))), T(rng.standard_normal((3, 4)), False)
    mse_loss(pred, tgt).backward()
    assert np.allclose(pred.grad, 2 * (pred.data - tgt.data) / 12, atol=1e-15)
    num = fd_grad(lambda: float(mse_loss(pred.data, tgt.data).data), pred.data)
    assert rel_err(pred.grad, num) < 1e-8


# -- AdamW ------------------------------------------------------------------
def test_adamw_zero_grad_zero_decay_is_exact_noop(rng):
    p = {"w": rng.standard_normal(5)}
    before = p["w"].copy()
    state = OptimizerState(weight_decay=0.0)
    for _ in range(3):
        adamw_step(p, {"w": np.zeros(5)}, state)
    assert np.array_equal(p["w"], before)


def test_adamw_single_step_oracle():
    p = {"w": np.zeros(1)}
    state = OptimizerState(weight_decay=0.0, base_lr=1e-3)
    adamw_step(p, {"w": np.ones(1)}, state)
    # hand-rolled: m_hat = g, v_hat = g^2 after bias correction
    expected = -1e-3 * 1.0 / (math.sqrt(1.0) + 1e-8)
    assert abs(p["w"][0] - expected) < 1e-15
    assert abs(p["w"][0] + 1e-3) < 1e-9


def test_adamw_pure_decay():
    p = {"w": np.ones(1)}
    adamw_step(p, {"w": np.zeros(1)}, OptimizerState(weight_decay=0.01, base_lr=1e-3))
    assert p["w"][0] == 1.0 - 1e-3 * 0.01


def test_adamw_skips_non_finite_gradient():
    p = {"w": np.ones(2)}
    state = OptimizerState()
    assert adamw_step(p, {"w": np.array([1.0, np.inf])}, state) is False
    assert state.step == 0 and state.skipped == 1 and np.array_equal(p["w"], [1, 1])


# -- schedule ---------------------------------------------------------------
def test_cosine_schedule_landmarks():
    s = ScheduleState(warmup_steps=10, total_steps=110, base_lr=1e-3)
    assert cosine_lr(0, s) == 0.0
    assert cosine_lr(10, s) == 1e-3
    assert abs(cosine_lr(110, s)) < 1e-12
    assert abs(cosine_lr(60, s) - 5e-4) < 1e-9
    # continuity at the end of the warm-up
    assert abs(cosine_lr(10, s) - s.base_lr * (10 - 1e-9) / 10) < 1e-12
    assert cosine_lr(9, s) < cosine_lr(10, s) and cosine_lr(11, s) < cosine_lr(10, s)


def test_cosine_schedule_without_warmup_starts_at_peak():
    assert cosine_lr(0, ScheduleState(0, 5, 0.1)) == 0.1


def test_schedule_validation():
    with pytest.raises(ConfigError):
        ScheduleState(5, 5, 1e-3)
    with pytest.raises(ConfigError):
        cosine_lr(6, ScheduleState(0, 5, 1e-3))


# -- LSTM -------------------------------------------------------------------
def _lstm_params(r, n, H, scale=1.0):
    return {"w_ih": T(scale * r.standard_normal((1, 4 * n))), "w_hh": T(scale * r.standard_normal((n, 4 * n))),
            "b": T(scale * r.standard_normal(4 * n)), "w_head": T(scale * r.standard_normal((n, H))),
            "b_head": T(r.standard_normal(H))}


def test_lstm_zero_weights_give_head_bias(rng):
    p = _lstm_params(rng, 3, 2, scale=0.0)
    out = lstm_forward(T(rng.standard_normal((4, 5, 1))), p, 3).data
    assert np.array_equal(out, np.broadcast_to(p["b_head"].data, (4, 2)))


def test_lstm_single_step_equals_one_cell(rng):
    n = 3
    p = _lstm_params(rng, n, 2)
    x = rng.standard_normal((2, 1, 1))
    pd = {k: v.data for k, v in p.items()}
    z = x[:, 0] @ pd["w_ih"] + pd["b"]

    def sig(v):
        return 1 / (1 + np.exp(-v))

    c = sig(z[:, :n]) * np.tanh(z[:, 2 * n:3 * n])
    h = sig(z[:, 3 * n:]) * np.tanh(c)
    assert np.allclose(lstm_forward(T(x), p, n).data, h @ pd["w_head"] + pd["b_head"], atol=1e-14)


def test_lstm_gradient_matches_fd():
    r = np.random.default_rng(4)
    p = _lstm_params(r, 4, 2, scale=0.5)
    x = T(r.standard_normal((1, 3, 1)))
    w = r.standard_normal((1, 2))
    (lstm_forward(x, p, 4) * Tensor(w)).sum().backward()
    for t in (x, *p.values()):
        num = fd_grad(lambda: float((lstm_forward(x.data, {k: v.data for k, v in p.items()}, 4).data * w).sum()),
                      t.data)
        assert rel_err(t.grad, num) < 1e-4


# -- tensor engine ----------------------------------------------------------
def test_gradient_accumulates_over_reused_nodes():
    x = T([2.0])
    y = x * x + x * 3.0
    y.sum().backward()
    assert x.grad[0] == 2 * 2.0 + 3.0


def test_broadcast_gradients_are_summed(rng):
    a, b = T(rng.standard_normal((3, 4))), T(rng.standard_normal(4))
    (a * b).sum().backward()
    assert np.allclose(b.grad, a.data.sum(0))


def test_gelu_matches_tanh_formula_and_fd(rng):
    x = rng.standard_normal(10)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    t = T(x.copy())
    out = gelu(t)
    assert np.allclose(out.data, ref, atol=1e-15)
    out.sum().backward()
    assert rel_err(t.grad, fd_grad(lambda: float(gelu(t.data).data.sum()), t.data)) < 1e-8


def test_index_add_matches_numpy_add_at(rng):
    target = np.zeros((6, 3))
    idx = rng.integers(0, 6, size=40)
    vals = rng.standard_normal((40, 3))
    ref = np.zeros((6, 3))
    np.add.at(ref, idx, vals)
    index_add(target, (idx,), vals)
    assert np.allclose(target, ref, atol=1e-13)


def test_scatter_concat_stack_gradients(rng):
    src = T(rng.standard_normal((3, 2)))
    out = scatter_add((4, 2), (np.array([0, 2, 0]),), src)
    assert np.allclose(out.data[0], src.data[0] + src.data[2]) and np.all(out.data[1] == 0)
    a, b = T(rng.standard_normal((2, 2))), T(rng.standard_normal((1, 2)))
    (concatenate([a, b]) * 2).sum().backward()
    (stack([a, a]) * 1).sum().backward()
    assert np.allclose(a.grad, 4) and np.allclose(b.grad, 2)


def test_no_grad_builds_no_graph():
    x = T([1.0])
    with no_grad():
        y = x * 2
    assert not y.requires_grad


def test_gradient_check_detects_a_broken_backward(rng):
    x = T(rng.standard_normal((2, 3)))
    assert gradient_check(lambda: x.tanh(), [x]) < 1e-8
    assert gradient_check(lambda: x.tanh(), [x], perturb=1e-2) > 1e-3
