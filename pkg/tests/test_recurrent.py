import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydra_lstm import autodiff as ad
from hydra_lstm.autodiff import DimensionError, Tensor
from hydra_lstm.recurrent import (
    EmptySequenceError,
    LstmLayerParams,
    LstmStack,
    Projection,
    assign_parameters,
    linear_head,
    load_parameters,
    lstm_layer,
    lstm_step,
    save_parameters,
)


def _scalar_step(W, U, b, x, h, c):
    """Plain-Python LSTM step, gate order (i, f, g, o)."""
    H = len(h)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    z = [
        sum(W[r][k] * x[k] for k in range(len(x))) + sum(U[r][k] * h[k] for k in range(H)) + b[r]
        for r in range(4 * H)
    ]
    c_new, h_new = [], []
    for j in range(H):
        i, f, g, o = sig(z[j]), sig(z[H + j]), math.tanh(z[2 * H + j]), sig(z[3 * H + j])
        c_new.append(f * c[j] + i * g)
        h_new.append(o * math.tanh(c_new[-1]))
    return h_new, c_new


def test_zero_params_give_zero_state():
    p = LstmLayerParams.zeros(3, 4)
    h, c = lstm_step(p, Tensor(np.array([1.0, -2.0, 5.0])), Tensor(np.zeros(4)), Tensor(np.zeros(4)))
    assert np.array_equal(h.data, np.zeros(4)) and np.array_equal(c.data, np.zeros(4))


def test_saturated_forget_gate_keeps_cell():
    p = LstmLayerParams.zeros(2, 3)
    p.b.data[3:6] = 50.0
    c_prev = np.array([0.3, -1.2, 2.0])
    _, c = lstm_step(p, Tensor(np.ones(2)), Tensor(np.zeros(3)), Tensor(c_prev))
    assert np.allclose(c.data, c_prev, atol=1e-12)


def test_step_matches_hand_calculation():
    rng = np.random.default_rng(0)
    p = LstmLayerParams.initialize(3, 2, rng)
    x, h, c = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
    h1, c1 = lstm_step(p, Tensor(x), Tensor(h), Tensor(c))
    h2, c2 = _scalar_step(p.W.data.tolist(), p.U.data.tolist(), p.b.data.tolist(), x, h, c)
    assert np.allclose(h1.data, h2, rtol=0, atol=1e-12)
    assert np.allclose(c1.data, c2, rtol=0, atol=1e-12)


def test_initialization_ranges():
    rng = np.random.default_rng(1)
    H = 16
    p = LstmLayerParams.initialize(5, H, rng)
    bound = 1 / math.sqrt(H)
    assert np.abs(p.W.data).max() <= bound and np.abs(p.U.data).max() <= bound
    forget = p.b.data[H : 2 * H]
    assert forget.min() >= 1 - bound and forget.max() <= 1 + bound


def test_zero_stack_gives_zero_sequence():
    stack = LstmStack([LstmLayerParams.zeros(3, 4), LstmLayerParams.zeros(4, 2)])
    out = stack.run_sequence(Tensor(np.random.default_rng(0).normal(size=(6, 3))))
    assert out.shape == (6, 2) and not out.data.any()


def _fold(params, x):
    T, B, _ = x.shape
    h = Tensor(np.zeros((B, params.hidden_size)))
    c = Tensor(np.zeros((B, params.hidden_size)))
    outs = []
    for t in range(T):
        h, c = lstm_step(params, Tensor(x[t]), h, c)
        outs.append(h.data)
    return np.stack(outs)


def test_fused_layer_equals_step_fold():
    rng = np.random.default_rng(2)
    p = LstmLayerParams.initialize(4, 5, rng)
    x = rng.normal(size=(9, 3, 4))
    assert np.allclose(lstm_layer(p, Tensor(x)).data, _fold(p, x), rtol=0, atol=1e-12)


def test_fused_layer_gradient_matches_step_fold_gradient():
    rng = np.random.default_rng(3)
    p = LstmLayerParams.initialize(3, 4, rng)
    x = Tensor(rng.normal(size=(7, 2, 3)), requires_grad=True)
    w = rng.normal(size=(7, 2, 4))

    ad.backward(ad.tensor_sum(ad.mul(lstm_layer(p, x), Tensor(w))))
    fused = [t.grad.copy() for t in (p.W, p.U, p.b, x)]
    for t in (p.W, p.U, p.b, x):
        t.grad = None
    h = Tensor(np.zeros((2, 4)))
    c = Tensor(np.zeros((2, 4)))
    terms = []
    for t in range(7):
        h, c = lstm_step(p, ad.take(x, t), h, c)
        terms.append(ad.tensor_sum(ad.mul(h, Tensor(w[t]))))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    ad.backward(total)
    for a, t in zip(fused, (p.W, p.U, p.b, x)):
        assert np.allclose(a, t.grad, rtol=1e-10, atol=1e-12)


def test_layer_gradient_finite_differences(fd_check):
    rng = np.random.default_rng(4)
    p = LstmLayerParams.initialize(3, 3, rng)
    x = Tensor(rng.uniform(-2, 2, (5, 2, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 2, 3)))
    err = fd_check(lambda: ad.tensor_sum(ad.mul(lstm_layer(p, x), w)), [p.W, p.U, p.b, x])
    assert err < 1e-4


def test_dropout_zero_training_flag_irrelevant():
    rng = np.random.default_rng(5)
    stack = LstmStack.initialize(3, [4, 4], rng, dropout=0.0)
    x = Tensor(rng.normal(size=(6, 3)))
    stack.training = True
    a = stack.run_sequence(x, 1).data
    stack.training = False
    assert np.array_equal(a, stack.run_sequence(x, 2).data)


def test_eval_mode_ignores_seed_and_training_uses_it():
    rng = np.random.default_rng(6)
    stack = LstmStack.initialize(3, [8, 8], rng, dropout=0.5)
    x = Tensor(rng.normal(size=(6, 2, 3)))
    assert np.array_equal(stack.run_sequence(x, 1).data, stack.run_sequence(x, 2).data)
    stack.training = True
    assert np.array_equal(stack.run_sequence(x, 1).data, stack.run_sequence(x, 1).data)
    assert not np.array_equal(stack.run_sequence(x, 1).data, stack.run_sequence(x, 2).data)


def test_single_layer_dropout_is_a_no_op():
    rng = np.random.default_rng(7)
    stack = LstmStack.initialize(3, [5], rng, dropout=0.4)
    x = Tensor(rng.normal(size=(4, 3)))
    ref = stack.run_sequence(x).data
    stack.training = True
    assert np.array_equal(stack.run_sequence(x, 3).data, ref)


@settings(max_examples=20, deadline=None)
@given(
    st.lists(st.integers(1, 6), min_size=1, max_size=3),
    st.lists(st.integers(1, 6), min_size=1, max_size=3),
    st.integers(0, 10_000),
)
def test_stack_composition_law(sizes_a, sizes_b, seed):
    rng = np.random.default_rng(seed)
    a = LstmStack.initialize(3, sizes_a, rng)
    b = LstmStack.initialize(sizes_a[-1], sizes_b, rng)
    joined = LstmStack(a.layers + b.layers)
    x = Tensor(rng.normal(size=(5, 2, 3)))
    two = b.run_sequence(a.run_sequence(x)).data
    assert np.abs(two - joined.run_sequence(x).data).max() <= 1e-12


def test_stack_rejects_misaligned_layers():
    with pytest.raises(DimensionError):
        LstmStack([LstmLayerParams.zeros(3, 4), LstmLayerParams.zeros(5, 2)])


def test_empty_sequence_error():
    stack = LstmStack([LstmLayerParams.zeros(3, 4)])
    with pytest.raises(EmptySequenceError):
        stack.run_sequence(Tensor(np.zeros((0, 3))))


def test_parameter_count_closed_form():
    stack = LstmStack.initialize(7, [128, 128], np.random.default_rng(0))
    expected = 4 * 128 * (7 + 128 + 1) + 4 * 128 * (128 + 128 + 1)
    assert stack.parameter_count() == expected


def test_linear_head_bias_and_identity():
    out = linear_head(Tensor(np.zeros((3, 4))), Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(4)))
    assert np.array_equal(out.data, [1.0, 2.0, 3.0])
    h = np.array([0.2, -0.7, 1.5])
    out = linear_head(Tensor(np.eye(3)), Tensor(np.zeros(3)), Tensor(h))
    assert np.array_equal(out.data, h)


def test_linear_head_gradient(fd_check):
    rng = np.random.default_rng(8)
    proj = Projection.initialize(4, rng)
    h = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 3)))
    assert fd_check(lambda: ad.tensor_sum(ad.mul(proj(h), w)), [proj.W, proj.b, h]) < 1e-6


def test_checkpoint_round_trip_is_exact_and_byte_stable(tmp_path):
    rng = np.random.default_rng(9)
    stack = LstmStack.initialize(3, [4], rng)
    params = stack.named_parameters("s")
    save_parameters(tmp_path / "a.json", params)
    save_parameters(tmp_path / "b.json", params)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    other = LstmStack.initialize(3, [4], np.random.default_rng(10))
    assign_parameters(other.named_parameters("s"), load_parameters(tmp_path / "a.json"))
    for name, t in other.named_parameters("s").items():
        assert t.data.tobytes() == params[name].data.tobytes()
