import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tbsa import numcore as nc


def test_linear():
    assert nc.linear(np.eye(2), [1.0, 2.0]).value.tolist() == [1.0, 2.0]
    assert nc.linear(np.zeros((3, 2)), [1.0, 2.0]).value.tolist() == [0.0, 0.0, 0.0]
    assert nc.linear([[1.0, 1.0]], [2.0, 3.0]).value.tolist() == [5.0]
    with pytest.raises(ValueError):
        nc.linear(np.eye(2), [1.0, 2.0, 3.0])


def test_linear_rows_match_vector_form(rng):
    W, X = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    rows = nc.linear(W, X).value
    for t in range(5):
        assert np.allclose(rows[t], W @ X[t])


def test_softmax_examples():
    assert np.allclose(nc.softmax(np.zeros(3)).value, 1 / 3)
    assert np.allclose(nc.softmax([math.log(1), math.log(3)]).value, [0.25, 0.75])
    x = np.array([0.3, -1.2, 2.0])
    assert np.allclose(nc.softmax(x + 100.0).value, nc.softmax(x).value, atol=1e-15)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)))
def test_softmax_is_distribution(v):
    p = nc.softmax(v).value
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9


def scalar_lstm_cell(x, h, c, w_x, w_h, b):
    """Independent loop-based LSTM step (gate blocks i, f, o, g)."""
    H = len(h)
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    pre = []
    for r in range(4 * H):
        s = b[r]
        for k in range(len(x)):
            s += w_x[r][k] * x[k]
        for k in range(H):
            s += w_h[r][k] * h[k]
        pre.append(s)
    h_new, c_new = [], []
    for j in range(H):
        i, f, o = sig(pre[j]), sig(pre[H + j]), sig(pre[2 * H + j])
        g = math.tanh(pre[3 * H + j])
        cj = f * c[j] + i * g
        c_new.append(cj)
        h_new.append(o * math.tanh(cj))
    return h_new, c_new


def test_lstm_cell_zero():
    p = nc.LstmParams(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    h, c = nc.lstm_cell(np.ones(3), np.zeros(2), np.zeros(2), p)
    assert h.tolist() == [0.0, 0.0] and c.tolist() == [0.0, 0.0]


def test_lstm_cell_forget_irrelevant_when_cell_empty(rng):
    p = nc.init_lstm(3, 2, rng)
    x, h0 = rng.normal(size=3), rng.normal(size=2)
    w_x = p.w_x.copy()
    w_x[2:4] += 5.0  # forget-gate rows
    a = nc.lstm_cell(x, h0, np.zeros(2), p)
    b = nc.lstm_cell(x, h0, np.zeros(2), nc.LstmParams(w_x, p.w_h, p.b))
    assert np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])


def test_lstm_cell_matches_scalar_reference(rng):
    p = nc.LstmParams(rng.normal(size=(12, 4)), rng.normal(size=(12, 3)), rng.normal(size=12))
    x, h, c = rng.normal(size=4), rng.normal(size=3), rng.normal(size=3)
    got_h, got_c = nc.lstm_cell(x, h, c, p)
    ref_h, ref_c = scalar_lstm_cell(x, h, c, p.w_x.tolist(), p.w_h.tolist(), p.b.tolist())
    assert np.allclose(got_h, ref_h, atol=1e-12) and np.allclose(got_c, ref_c, atol=1e-12)


def test_lstm_cell_shape_errors(rng):
    p = nc.init_lstm(3, 2, rng)
    with pytest.raises(ValueError):
        nc.lstm_cell(np.ones(4), np.zeros(2), np.zeros(2), p)
    with pytest.raises(ValueError):
        nc.lstm_cell(np.ones(3), np.zeros(3), np.zeros(2), p)


def test_lstm_sequence_matches_cell_loop(rng):
    p = nc.LstmParams(rng.normal(size=(8, 3)), rng.normal(size=(8, 2)), rng.normal(size=8))
    X = rng.normal(size=(5, 3))
    h, c, rows = np.zeros(2), np.zeros(2), []
    for x in X:
        h, c = nc.lstm_cell(x, h, c, p)
        rows.append(h)
    assert np.allclose(nc.lstm_sequence(X, p).value, rows, atol=1e-14)


def test_bilstm_length_one(rng):
    f, b = nc.init_lstm(3, 2, rng), nc.init_lstm(3, 2, rng)
    x = rng.normal(size=(1, 3))
    out = nc.bilstm(x, f, b).value[0]
    zero = np.zeros(2)
    assert np.allclose(out, np.concatenate([nc.lstm_cell(x[0], zero, zero, f)[0],
                                            nc.lstm_cell(x[0], zero, zero, b)[0]]))


def test_bilstm_reverse_symmetry(rng):
    f, b = nc.init_lstm(3, 2, rng), nc.init_lstm(3, 2, rng)
    X = rng.normal(size=(6, 3))
    out = nc.bilstm(X, f, b).value
    swapped = nc.bilstm(X[::-1], b, f).value[::-1]
    assert np.allclose(out, np.concatenate([swapped[:, 2:], swapped[:, :2]], axis=1), atol=1e-14)


def test_bilstm_zero_params_and_errors(rng):
    z = nc.LstmParams(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    assert not nc.bilstm(rng.normal(size=(4, 3)), z, z).value.any()
    with pytest.raises(ValueError):
        nc.bilstm(np.zeros((0, 3)), z, z)


def test_cross_entropy():
    assert nc.cross_entropy([0.0, 1.0, 0.0], 1).value == 0.0
    assert nc.cross_entropy([0.5, 0.5], 0).value == pytest.approx(math.log(2))
    assert nc.cross_entropy([1e-20, 1.0 - 1e-20], 0).value == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        nc.cross_entropy([0.5, 0.5], 2)
    rows = nc.cross_entropy([[0.5, 0.5], [0.25, 0.75]], [0, 1]).value
    assert rows == pytest.approx((math.log(2) - math.log(0.75)) / 2)


def test_dropout_identity_cases(rng):
    v = rng.normal(size=7)
    assert nc.dropout(v, 0.5, rng, training=False).value.tolist() == v.tolist()
    assert nc.dropout(v, 0.0, rng, training=True).value.tolist() == v.tolist()
    with pytest.raises(ValueError):
        nc.dropout(v, 1.0, rng, True)


def test_dropout_expectation_monte_carlo():
    rng = np.random.default_rng(0)
    v = np.array([1.0, -2.0, 0.5])
    draws = nc.dropout(np.tile(v, (100_000, 1)), 0.5, rng, True).value
    assert np.allclose(draws.mean(axis=0), v, rtol=0.01)
    assert set(np.unique(draws[:, 0])) <= {0.0, 2.0}


def test_glorot_init():
    rng = np.random.default_rng(0)
    W = nc.glorot_init(3, 3, rng)
    assert np.all(np.abs(W) < 1.0)
    assert np.array_equal(W, nc.glorot_init(3, 3, np.random.default_rng(0)))
    big = nc.glorot_init(400, 600, rng)
    a2 = 6.0 / 1000
    assert big.var() == pytest.approx(a2 / 3, rel=0.05)


def _fd(f, x, step=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        up = f()
        x[idx] = old - step
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * step)
    return g


def test_softmax_cross_entropy_gradient_identity(rng):
    W, x = nc.param(rng.normal(size=(4, 3))), rng.normal(size=3)
    logits = nc.linear(W, x)
    p = nc.softmax(logits)
    loss = nc.cross_entropy(p, 2)
    loss.backward()
    expected = p.value - np.eye(4)[2]
    assert np.allclose(W.grad, np.outer(expected, x), atol=1e-12)


def test_unused_parameter_gets_zero_gradient(rng):
    used, unused = nc.param(rng.normal(size=(2, 2))), nc.param(rng.normal(size=3))
    loss = nc.cross_entropy(nc.softmax(nc.linear(used, np.ones(2))), 0)
    grads = nc.gradients(loss, {"used": used, "unused": unused})
    assert np.array_equal(grads["unused"], np.zeros(3))
    assert np.any(grads["used"] != 0)


def test_gradients_reject_non_scalar():
    with pytest.raises(ValueError):
        nc.gradients(nc.param(np.ones(2)) * 2.0, {})


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_sequence_gradients_fd(rng, reverse):
    X = rng.normal(size=(4, 3))
    p = [rng.normal(size=(8, 3)), rng.normal(size=(8, 2)), rng.normal(size=8)]
    R = rng.normal(size=(4, 2))

    def build():
        leaves = [nc.param(X)] + [nc.param(a) for a in p]
        out = nc.lstm_sequence(leaves[0], nc.LstmParams(*leaves[1:]), reverse=reverse)
        return leaves, (out * R).sum()

    leaves, loss = build()
    loss.backward()
    for leaf, arr in zip(leaves, [X] + p):
        num = _fd(lambda: float(build()[1].value), arr)
        assert np.allclose(leaf.grad, num, atol=1e-8)


def test_gated_carry_gradients_fd(rng):
    H, G = rng.normal(size=(5, 3)), rng.uniform(0.1, 0.9, size=(5, 3))
    R = rng.normal(size=(5, 3))

    def build():
        h, g = nc.param(H), nc.param(G)
        return (h, g), (nc.gated_carry(h, g) * R).sum()

    (h, g), loss = build()
    loss.backward()
    assert np.allclose(h.grad, _fd(lambda: float(build()[1].value), H), atol=1e-8)
    assert np.allclose(g.grad, _fd(lambda: float(build()[1].value), G), atol=1e-8)


def test_masked_softmax_gradient_fd(rng):
    mask = rng.random((3, 5)) > 0.4
    mask[:, 0] = True
    L, R = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))

    def build():
        leaf = nc.param(L)
        return leaf, (nc.masked_softmax(leaf, mask) * R).sum()

    leaf, loss = build()
    loss.backward()
    assert np.allclose(leaf.grad, _fd(lambda: float(build()[1].value), L), atol=1e-8)
    assert np.all(leaf.grad[~mask] == 0.0)


def test_adam_first_step_is_sign_step():
    params = {"w": np.array([1.0, -1.0, 0.5])}
    g = {"w": np.array([3.0, -0.2, 50.0])}
    state = nc.AdamState()
    nc.adam_step(params, g, state, lr=0.01)
    assert np.allclose(params["w"] - [1.0, -1.0, 0.5], -0.01 * np.sign(g["w"]), atol=1e-8)


def test_adam_zero_gradient():
    params = {"w": np.array([1.0, 2.0])}
    state = nc.AdamState()
    nc.adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    assert params["w"].tolist() == [1.0, 2.0] and state.step == 1


def test_adam_two_steps_hand_computed():
    # g = 0.5, lr = 0.1, beta1 = beta2 = 0.9:
    # step 1: m = 0.05, v = 0.025, m_hat = 0.5, v_hat = 0.25
    # step 2: m = 0.095, v = 0.0475, m_hat = 0.5, v_hat = 0.25
    params = {"w": np.array([1.0])}
    state = nc.AdamState(beta1=0.9, beta2=0.9, eps=1e-8)
    delta = 0.1 * 0.5 / (0.5 + 1e-8)
    nc.adam_step(params, {"w": np.array([0.5])}, state, lr=0.1)
    assert state.m["w"][0] == pytest.approx(0.05) and state.v["w"][0] == pytest.approx(0.025)
    assert params["w"][0] == pytest.approx(1.0 - delta, abs=1e-15)
    nc.adam_step(params, {"w": np.array([0.5])}, state, lr=0.1)
    assert state.m["w"][0] == pytest.approx(0.095) and state.v["w"][0] == pytest.approx(0.0475)
    assert params["w"][0] == pytest.approx(1.0 - 2 * delta, abs=1e-14)
