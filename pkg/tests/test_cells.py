import math

import numpy as np
import pytest

from conftest import analytic_grads, numeric_grad, rel_err
from rnnreg import cells as C
from rnnreg import tensor as T
from rnnreg.errors import ShapeError
from rnnreg.tensor import Tensor, parameter

# frozen scalar-oracle values (sigma/tanh chain at 40-digit precision)
LSTM_SCALAR_C = 0.052323622835864663
LSTM_SCALAR_H = 0.027443772737388114
HALF_TANH_03 = 0.14565630622579545
TANH_05 = 0.4621171572600098


def zero_lstm(i_size, h_size):
    return C.LSTMParams(
        parameter(np.zeros((i_size, 4 * h_size))),
        parameter(np.zeros((h_size, 4 * h_size))),
        parameter(np.zeros(4 * h_size)),
    )


def test_lstm_step_zero_params():
    params = zero_lstm(2, 3)
    state = C.initial_state("lstm", 1, 3)
    step = C.lstm_step(params, Tensor(np.zeros((1, 2))), state)
    assert np.all(step.i.data == 0.5)
    assert np.all(step.f.data == 0.5)
    assert np.all(step.o.data == 0.5)
    assert np.all(step.g.data == 0.0)
    assert np.all(step.c_cand.data == 0.0)
    assert np.all(step.h_cand.data == 0.0)


def test_lstm_step_scalar_oracle():
    # H=I=1, every weight 0.1, b=0, x=1, h=c=0
    params = C.LSTMParams(
        parameter(np.full((1, 4), 0.1)),
        parameter(np.full((1, 4), 0.1)),
        parameter(np.zeros(4)),
    )
    state = C.initial_state("lstm", 1, 1)
    step = C.lstm_step(params, Tensor(np.ones((1, 1))), state)
    assert abs(step.c_cand.item() - LSTM_SCALAR_C) < 1e-15
    assert abs(step.h_cand.item() - LSTM_SCALAR_H) < 1e-15


def test_lstm_saturated_forget_gate_remembers_cell():
    params = zero_lstm(1, 1)
    params.b.data[1] = 100.0  # f-gate slice of [i, f, o, g]
    state = C.CellState(Tensor(np.zeros((1, 1))), Tensor(np.array([[0.3]])))
    step = C.lstm_step(params, Tensor(np.zeros((1, 1))), state)
    assert step.f.item() == 1.0  # float64-saturated
    assert step.c_cand.item() == 0.3
    assert abs(step.h_cand.item() - HALF_TANH_03) < 1e-15


def test_lstm_f_saturated_i_closed_keeps_cell_exactly():
    params = zero_lstm(1, 2)
    params.b.data[2:4] = 100.0  # f slice
    params.b.data[0:2] = -100.0  # i slice
    c_prev = np.array([[0.37, -1.25]])
    state = C.CellState(Tensor(np.zeros((1, 2))), Tensor(c_prev.copy()))
    step = C.lstm_step(params, Tensor(np.zeros((1, 1))), state)
    assert np.array_equal(step.c_cand.data, c_prev)


def test_lstm_step_requires_cell_state():
    params = zero_lstm(1, 1)
    with pytest.raises(ShapeError):
        C.lstm_step(params, Tensor(np.zeros((1, 1))), C.CellState(Tensor(np.zeros((1, 1)))))


def test_gru_step_zero_params():
    params = C.GRUParams(
        parameter(np.zeros((2, 9))), parameter(np.zeros((3, 9))), parameter(np.zeros(9))
    )
    h_prev = Tensor(np.array([[0.4, -0.2, 1.0]]))
    step = C.gru_step(params, Tensor(np.zeros((1, 2))), h_prev)
    assert np.all(step.u.data == 0.5)
    assert np.all(step.cand.data == 0.0)
    assert np.allclose(step.h_cand.data, 0.5 * h_prev.data, atol=1e-16)


def test_gru_saturated_update_gate_passes_state_through():
    params = C.GRUParams(
        parameter(np.zeros((1, 3))), parameter(np.zeros((1, 3))), parameter(np.zeros(3))
    )
    params.b.data[0] = -100.0  # u-gate slice of [u, r, cand]
    h_prev = Tensor(np.array([[0.8]]))
    step = C.gru_step(params, Tensor(np.ones((1, 1))), h_prev)
    assert np.allclose(step.h_cand.data, h_prev.data, atol=1e-40)


def test_gru_one_unit_matches_scalar_oracle(rng):
    wx = rng.uniform(-1, 1, size=(1, 3))
    wh = rng.uniform(-1, 1, size=(1, 3))
    b = rng.uniform(-1, 1, size=3)
    x, h = 0.7, -0.3
    params = C.GRUParams(parameter(wx.copy()), parameter(wh.copy()), parameter(b.copy()))
    step = C.gru_step(params, Tensor(np.array([[x]])), Tensor(np.array([[h]])))

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    u = sig(wx[0, 0] * x + wh[0, 0] * h + b[0])
    r = sig(wx[0, 1] * x + wh[0, 1] * h + b[1])
    cand = math.tanh(wx[0, 2] * x + wh[0, 2] * (r * h) + b[2])
    expect = (1 - u) * h + u * cand
    assert abs(step.h_cand.item() - expect) < 1e-12


def test_rnn_step_cases():
    params = C.RNNParams(
        parameter(np.zeros((1, 1))), parameter(np.zeros((1, 1))), parameter(np.zeros(1))
    )
    out = C.rnn_step(params, Tensor(np.array([[0.5]])), Tensor(np.zeros((1, 1))))
    assert out.item() == 0.0

    params = C.RNNParams(
        parameter(np.ones((1, 1))), parameter(np.ones((1, 1))), parameter(np.zeros(1))
    )
    out = C.rnn_step(params, Tensor(np.array([[0.5]])), Tensor(np.zeros((1, 1))))
    assert abs(out.item() - TANH_05) < 1e-15

    out = C.rnn_step(params, Tensor(np.array([[100.0]])), Tensor(np.zeros((1, 1))))
    assert out.item() == 1.0


def test_steps_are_deterministic(rng):
    params = C.init_params("lstm", 3, 4, rng)
    x = Tensor(rng.standard_normal((2, 3)))
    state = C.initial_state("lstm", 2, 4)
    a = C.lstm_step(params, x, state)
    b = C.lstm_step(params, x, state)
    assert a.h_cand.data.tobytes() == b.h_cand.data.tobytes()
    assert a.c_cand.data.tobytes() == b.c_cand.data.tobytes()


def test_init_uniform_bounds(rng):
    params = C.init_params("lstm", 5, 4, rng, scheme="uniform", scale=0.04, forget_bias=0.0)
    assert np.all(np.abs(params.w_x.data) <= 0.04)
    assert np.all(np.abs(params.w_h.data) <= 0.04)
    assert np.all(params.b.data == 0.0)


def test_init_forget_bias_default_is_one(rng):
    params = C.init_params("lstm", 2, 3, rng)
    assert np.all(params.b.data[3:6] == 1.0)  # f slice of [i, f, o, g]
    assert np.all(params.b.data[:3] == 0.0)


def test_init_orthogonal_blocks(rng):
    params = C.init_params("rnn", 3, 6, rng, scheme="orthogonal")
    w = params.w_h.data
    assert np.max(np.abs(w.T @ w - np.eye(6))) < 1e-10
    lstm = C.init_params("lstm", 3, 4, rng, scheme="orthogonal")
    for k in range(4):
        blk = lstm.w_h.data[:, 4 * k : 4 * (k + 1)]
        assert np.max(np.abs(blk.T @ blk - np.eye(4))) < 1e-10


def test_init_rejects_degenerate_sizes(rng):
    with pytest.raises(ShapeError):
        C.init_params("lstm", 0, 4, rng)
    with pytest.raises(ShapeError):
        C.init_params("gru", 3, 0, rng)


@pytest.mark.parametrize("kind", ["lstm", "gru", "rnn"])
def test_step_gradients_pass_finite_difference_check(kind, rng):
    B, I, H = 2, 3, 3
    params = C.init_params(kind, I, H, rng, scale=0.5, forget_bias=0.0)
    x = Tensor(rng.standard_normal((B, I)))
    h0 = Tensor(rng.standard_normal((B, H)))
    c0 = Tensor(rng.standard_normal((B, H)))
    probe = Tensor(rng.standard_normal((B, H)))

    def loss_fn():
        if kind == "lstm":
            step = C.lstm_step(params, x, C.CellState(h0, c0))
            out = step.h_cand
        elif kind == "gru":
            out = C.gru_step(params, x, h0).h_cand
        else:
            out = C.rnn_step(params, x, h0)
        return T.mean_all(T.mul(out, probe))

    tensors = [t for _, t in params.tensors()]
    grads = analytic_grads(loss_fn, tensors)
    for p, analytic in zip(tensors, grads):
        numeric = numeric_grad(lambda: loss_fn().item(), p.data)
        assert rel_err(analytic, numeric) < 1e-4
