"""Recurrent cell step functions: vanilla tanh-RNN, GRU, and LSTM.

Steps return *candidate* states plus the raw gates instead of final states:
the stochastic regularizers own final-state assembly, and the zoneout hidden
update specifically needs the pre-zoneout cell candidate.  All functions are
pure and deterministic; identical inputs give bitwise-identical outputs.

Gate storage conventions (fixed here, since the math does not pin one down):

* LSTM weights stack the four gates as ``[i, f, o, g]`` along the 4H axis;
  i/f/o are sigmoid gates, g is the tanh candidate.
* GRU weights stack ``[u, r, candidate]`` along the 3H axis (update gate u,
  reset gate r, standard reset-before-matmul candidate).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

GATE_ORDER = ("i", "f", "o", "g")
GRU_GATE_ORDER = ("u", "r", "cand")


@dataclass
class LSTMParams:
    w_x: Tensor  # I x 4H
    w_h: Tensor  # H x 4H
    b: Tensor  # 4H

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w_x", self.w_x), ("w_h", self.w_h), ("b", self.b)]


@dataclass
class GRUParams:
    w_x: Tensor  # I x 3H
    w_h: Tensor  # H x 3H
    b: Tensor  # 3H

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w_x", self.w_x), ("w_h", self.w_h), ("b", self.b)]


@dataclass
class RNNParams:
    w_x: Tensor  # I x H
    w_h: Tensor  # H x H
    b: Tensor  # H

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w_x", self.w_x), ("w_h", self.w_h), ("b", self.b)]


CellParams = LSTMParams | GRUParams | RNNParams


@dataclass
class CellState:
    """Per-timestep recurrent state: h everywhere, c only for LSTM."""

    h: Tensor
    c: Tensor | None = None

    def detach(self) -> "CellState":
        return CellState(self.h.detach(), None if self.c is None else self.c.detach())


class LSTMStep(NamedTuple):
    i: Tensor
    f: Tensor
    o: Tensor
    g: Tensor
    c_cand: Tensor
    h_cand: Tensor  # o * tanh(c_cand)


class GRUStep(NamedTuple):
    u: Tensor
    r: Tensor
    cand: Tensor
    h_cand: Tensor


def lstm_step(params: LSTMParams, x_t: Tensor, state: CellState) -> LSTMStep:
    """One LSTM step producing gates and candidate states.

    i, f, o = sigmoid of their pre-activation slices, g = tanh of its slice,
    c_cand = f*c_prev + i*g, h_cand = o*tanh(c_cand); the final (possibly
    zoned/dropped) state is assembled by the caller.
    """
    if state.c is None:
        raise ShapeError("lstm_step: state.c is required for LSTM")
    pre = T.affine(x_t, params.w_x, state.h, params.w_h, params.b)
    i, f, o, g, c_cand = T.lstm_cell(pre, state.c)
    return LSTMStep(i, f, o, g, c_cand, T.tanh_mul(o, c_cand))


def gru_step(params: GRUParams, x_t: Tensor, h_prev: Tensor) -> GRUStep:
    """One GRU step: u, r = sigmoid gates; cand = tanh(W_x x + W_h (r*h) + b);
    h_cand = (1-u)*h_prev + u*cand."""
    hidden = params.hidden_size
    # the candidate's recurrent product takes r*h_prev, so the [u, r] slices
    # and the candidate slice go through separate affines
    pre_ur = T.affine(
        x_t,
        T.slice_cols(params.w_x, 0, 2 * hidden),
        h_prev,
        T.slice_cols(params.w_h, 0, 2 * hidden),
        T.slice_vec(params.b, 0, 2 * hidden),
    )
    u = T.sigmoid(T.slice_cols(pre_ur, 0, hidden))
    r = T.sigmoid(T.slice_cols(pre_ur, hidden, 2 * hidden))
    rh = T.mul(r, h_prev)
    cand = T.tanh(
        T.affine(
            x_t,
            T.slice_cols(params.w_x, 2 * hidden, 3 * hidden),
            rh,
            T.slice_cols(params.w_h, 2 * hidden, 3 * hidden),
            T.slice_vec(params.b, 2 * hidden, 3 * hidden),
        )
    )
    h_cand = T.add(T.mul(T.one_minus(u), h_prev), T.mul(u, cand))
    return GRUStep(u, r, cand, h_cand)


def rnn_step(params: RNNParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One vanilla step: h_cand = tanh(W_x x_t + W_h h_prev + b)."""
    return T.tanh(T.affine(x_t, params.w_x, h_prev, params.w_h, params.b))


# ---------------------------------------------------------------------------
# initialization


def init_params(
    kind: str,
    input_size: int,
    hidden_size: int,
    rng: np.random.Generator,
    scheme: str = "uniform",
    scale: float = 0.04,
    forget_bias: float = 1.0,
) -> CellParams:
    """Fresh cell parameters.

    scheme="uniform" draws every weight from U[-scale, scale]; "orthogonal"
    makes each H x H recurrent gate block orthogonal (QR-based) and keeps the
    input weights uniform.  Biases start at zero except the LSTM forget-gate
    slice, which starts at ``forget_bias``.
    """
    if input_size <= 0 or hidden_size <= 0:
        raise ShapeError(
            f"init_params: sizes must be positive, got I={input_size} H={hidden_size}"
        )
    if scheme not in ("uniform", "orthogonal"):
        raise ValueError(f"init_params: unknown scheme {scheme!r}")
    if scheme == "uniform" and scale <= 0:
        raise ValueError("init_params: uniform scheme needs scale > 0")
    n_gates = {"lstm": 4, "gru": 3, "rnn": 1}.get(kind)
    if n_gates is None:
        raise ValueError(f"init_params: unknown cell kind {kind!r}")

    w_x = rng.uniform(-scale, scale, size=(input_size, n_gates * hidden_size))
    if scheme == "uniform":
        w_h = rng.uniform(-scale, scale, size=(hidden_size, n_gates * hidden_size))
    else:
        blocks = [_orthogonal(hidden_size, rng) for _ in range(n_gates)]
        w_h = np.concatenate(blocks, axis=1)
    b = np.zeros(n_gates * hidden_size)

    if kind == "lstm":
        b[hidden_size : 2 * hidden_size] = forget_bias  # f-gate slice
        return LSTMParams(T.parameter(w_x), T.parameter(w_h), T.parameter(b))
    if kind == "gru":
        return GRUParams(T.parameter(w_x), T.parameter(w_h), T.parameter(b))
    return RNNParams(T.parameter(w_x), T.parameter(w_h), T.parameter(b))


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def initial_state(kind: str, batch: int, hidden: int) -> CellState:
    """All-zero, non-learned h_0 (and c_0 for LSTM)."""
    h = Tensor(np.zeros((batch, hidden)))
    if kind == "lstm":
        return CellState(h, Tensor(np.zeros((batch, hidden))))
    return CellState(h)
