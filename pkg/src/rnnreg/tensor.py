"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design notes:

* Define-by-run: while a :class:`Graph` is active (``with Graph():``) every
  op whose operands are tracked appends a backward rule to the tape.
  Execution order is a topological order, so ``backward`` simply replays the
  tape in reverse; a tensor consumed by several ops accumulates the sum of
  all path gradients.
* Outside a graph the same ops run without recording, which is the eval
  fast path.
* Storage is always C-contiguous float64.  There is no broadcasting except
  scalar-by-tensor (:func:`scale`, :func:`lerp`) and the explicit
  :func:`add_bias`; both keeps the backward rules trivial to audit.
* A graph is consumed exactly once by :func:`backward`; reuse raises
  :class:`~rnnreg.errors.GraphError`.  Tensors that should cross step
  boundaries (carried RNN state) must be ``detach()``-ed.

The hot fused kernels (LSTM cell, mask mixing, softmax cross-entropy) are
delegated to :mod:`rnnreg.backend`, which picks the compiled extension or
the numpy fallback.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ._kernels_np import sigmoid as _safe_sigmoid
from .backend import kernels as K
from .errors import GraphError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "muladd",
    "scale",
    "one_minus",
    "add_bias",
    "sigmoid",
    "tanh",
    "sqrt",
    "slice_cols",
    "slice_vec",
    "concat_rows",
    "sum_rows",
    "mean_all",
    "affine",
    "lstm_cell",
    "tanh_mul",
    "mask_mix",
    "lerp",
    "softmax_cross_entropy",
]


class Tensor:
    """A dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "graph")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype == np.float64 and data.flags.c_contiguous:
            self.data = data
        else:
            arr = np.asarray(data, dtype=np.float64)
            # note: ascontiguousarray would promote 0-d scalars to 1-d
            self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's values, cut off from any graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("param")
        if self.graph is not None:
            flags.append("graph")
        tag = f" [{', '.join(flags)}]" if flags else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


class Graph:
    """Ordered tape of executed ops; consumed exactly once by backward()."""

    __slots__ = ("_nodes", "_deferred", "consumed", "_entered")

    def __init__(self):
        self._nodes: list = []
        # weight-gradient GEMMs batched across timesteps: id(w) -> (w, lefts, gouts)
        self._deferred: dict = {}
        self.consumed = False
        self._entered = False

    def defer_weight_grad(self, w: "Tensor", left: np.ndarray, gout: np.ndarray) -> None:
        """Queue gw += left.T @ gout, executed as one stacked GEMM at the end
        of backward() (accumulation order does not affect the sum)."""
        entry = self._deferred.get(id(w))
        if entry is None:
            self._deferred[id(w)] = (w, [left], [gout])
        else:
            entry[1].append(left)
            entry[2].append(gout)

    def __enter__(self) -> "Graph":
        global _ACTIVE
        if _ACTIVE is not None:
            raise GraphError("a graph is already active; graphs do not nest")
        if self.consumed:
            raise GraphError("cannot re-enter a consumed graph")
        self._entered = True
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE
        _ACTIVE = None

    def __len__(self) -> int:
        return len(self._nodes)


_ACTIVE: Graph | None = None


def active_graph() -> Graph | None:
    return _ACTIVE


def _should_record(*operands: Tensor) -> bool:
    g = _ACTIVE
    if g is None:
        return False
    track = False
    for t in operands:
        tg = t.graph
        if tg is not None:
            if tg is not g:
                raise GraphError(
                    "operand was produced under a different graph; detach() it "
                    "before reuse"
                )
            track = True
        elif t.requires_grad:
            track = True
    return track


def _push(outs: tuple, bwd) -> None:
    g = _ACTIVE
    for o in outs:
        o.graph = g
    g._nodes.append((outs, bwd))


def _acc(t: Tensor) -> np.ndarray | None:
    """Gradient buffer of t, lazily zero-initialized; None if t is untracked."""
    if t.requires_grad or t.graph is not None:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        return t.grad
    return None


def backward(loss: Tensor, retain: Iterable[Tensor] = ()) -> None:
    """Populate gradients of every tracked tensor reachable from ``loss``.

    Intermediate adjoints are freed as soon as their node has fired; pass
    tensors in ``retain`` to keep theirs (used by the gradient-flow probe).
    """
    g = loss.graph
    if g is None:
        raise GraphError("loss tensor is not attached to a live graph")
    if g.consumed:
        raise GraphError("graph already consumed by backward()")
    if loss.data.size != 1:
        raise GraphError(f"backward() requires a scalar loss, got shape {loss.data.shape}")
    g.consumed = True
    retain_ids = {id(t) for t in retain}
    loss.grad = np.ones_like(loss.data)
    nodes = g._nodes
    for k in range(len(nodes) - 1, -1, -1):
        outs, bwd = nodes[k]
        for o in outs:
            if o.grad is not None:
                bwd()
                break
        for o in outs:
            if id(o) not in retain_ids:
                o.grad = None
        nodes[k] = None
    g._nodes = []
    for w, lefts, gouts in g._deferred.values():
        gw = _acc(w)
        if gw is not None:
            if len(lefts) == 1:
                gw += lefts[0].T @ gouts[0]
            else:
                gw += np.concatenate(lefts, axis=0).T @ np.concatenate(gouts, axis=0)
    g._deferred.clear()


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: cannot multiply shapes {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)
    if _should_record(a, b):

        def bwd():
            gout = out.grad
            ga = _acc(a)
            if ga is not None:
                ga += gout @ b.data.T
            gb = _acc(b)
            if gb is not None:
                gb += a.data.T @ gout

        _push((out,), bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    if _should_record(a, b):

        def bwd():
            gout = out.grad
            ga = _acc(a)
            if ga is not None:
                ga += gout
            gb = _acc(b)
            if gb is not None:
                gb += gout

        _push((out,), bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _should_record(a, b):

        def bwd():
            gout = out.grad
            ga = _acc(a)
            if ga is not None:
                ga += gout
            gb = _acc(b)
            if gb is not None:
                gb -= gout

        _push((out,), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    if _should_record(a, b):

        def bwd():
            gout = out.grad
            ga = _acc(a)
            if ga is not None:
                ga += gout * b.data
            gb = _acc(b)
            if gb is not None:
                gb += gout * a.data

        _push((out,), bwd)
    return out


def muladd(a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """a*b + c*d in one node (the LSTM cell update shape)."""
    _same_shape(a, b, "muladd")
    _same_shape(a, c, "muladd")
    _same_shape(a, d, "muladd")
    out = Tensor(a.data * b.data + c.data * d.data)
    if _should_record(a, b, c, d):

        def bwd():
            gout = out.grad
            for x, y in ((a, b), (b, a), (c, d), (d, c)):
                gx = _acc(x)
                if gx is not None:
                    gx += gout * y.data

        _push((out,), bwd)
    return out


def scale(t: Tensor, c: float) -> Tensor:
    out = Tensor(t.data * c)
    if _should_record(t):

        def bwd():
            gt = _acc(t)
            if gt is not None:
                gt += out.grad * c

        _push((out,), bwd)
    return out


def one_minus(t: Tensor) -> Tensor:
    out = Tensor(1.0 - t.data)
    if _should_record(t):

        def bwd():
            gt = _acc(t)
            if gt is not None:
                gt -= out.grad

        _push((out,), bwd)
    return out


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Add a length-N bias row to every row of an B x N matrix."""
    if m.data.ndim != 2 or b.data.ndim != 1 or m.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"add_bias: matrix {m.data.shape} incompatible with bias {b.data.shape}"
        )
    out = Tensor(m.data + b.data)
    if _should_record(m, b):

        def bwd():
            gout = out.grad
            gm = _acc(m)
            if gm is not None:
                gm += gout
            gb = _acc(b)
            if gb is not None:
                gb += gout.sum(axis=0)

        _push((out,), bwd)
    return out


def sigmoid(t: Tensor) -> Tensor:
    out = Tensor(_safe_sigmoid(t.data))
    if _should_record(t):

        def bwd():
            gt = _acc(t)
            if gt is not None:
                s = out.data
                gt += out.grad * s * (1.0 - s)

        _push((out,), bwd)
    return out


def tanh(t: Tensor) -> Tensor:
    out = Tensor(np.tanh(t.data))
    if _should_record(t):

        def bwd():
            gt = _acc(t)
            if gt is not None:
                y = out.data
                gt += out.grad * (1.0 - y * y)

        _push((out,), bwd)
    return out


def sqrt(t: Tensor) -> Tensor:
    """Elementwise square root; the gradient at exactly 0 is taken as 0."""
    out = Tensor(np.sqrt(t.data))
    if _should_record(t):

        def bwd():
            gt = _acc(t)
            if gt is not None:
                y = out.data
                gt += np.where(y > 0.0, out.grad * 0.5 / np.where(y > 0.0, y, 1.0), 0.0)

        _push((out,), bwd)
    return out


def slice_cols(t: Tensor, lo: int, hi: int) -> Tensor:
    if t.data.ndim != 2 or not (0 <= lo < hi <= t.data.shape[1]):
        raise ShapeError(f"slice_cols: [{lo}:{hi}] invalid for shape {t.data.shape}")
    out = Tensor(np.ascontiguousarray(t.data[:, lo:hi]))
    if _should_record(t):

        def bwd():
            gt = _acc(t)
            if gt is not None:
                gt[:, lo:hi] += out.grad

        _push((out,), bwd)
    return out


def slice_vec(t: Tensor, lo: int, hi: int) -> Tensor:
    if t.data.ndim != 1 or not (0 <= lo < hi <= t.data.shape[0]):
        raise ShapeError(f"slice_vec: [{lo}:{hi}] invalid for shape {t.data.shape}")
    out = Tensor(t.data[lo:hi].copy())
    if _should_record(t):

        def bwd():
            gt = _acc(t)
            if gt is not None:
                gt[lo:hi] += out.grad

        _push((out,), bwd)
    return out


def concat_rows(ts: Sequence[Tensor]) -> Tensor:
    if not ts:
        raise ShapeError("concat_rows: empty input")
    cols = ts[0].data.shape[1]
    for t in ts:
        if t.data.ndim != 2 or t.data.shape[1] != cols:
            raise ShapeError("concat_rows: inputs must be 2-D with equal column counts")
    out = Tensor(np.concatenate([t.data for t in ts], axis=0))
    if _should_record(*ts):

        def bwd():
            gout = out.grad
            row = 0
            for t in ts:
                n = t.data.shape[0]
                gt = _acc(t)
                if gt is not None:
                    gt += gout[row : row + n]
                row += n

        _push((out,), bwd)
    return out


def sum_rows(t: Tensor) -> Tensor:
    """Row sums of a B x H matrix, returned as a length-B vector."""
    if t.data.ndim != 2:
        raise ShapeError(f"sum_rows: expected 2-D input, got shape {t.data.shape}")
    out = Tensor(t.data.sum(axis=1))
    if _should_record(t):

        def bwd():
            gt = _acc(t)
            if gt is not None:
                gt += out.grad[:, None]

        _push((out,), bwd)
    return out


def mean_all(t: Tensor) -> Tensor:
    out = Tensor(np.asarray(t.data.mean()))
    if _should_record(t):

        def bwd():
            gt = _acc(t)
            if gt is not None:
                gt += out.grad * (1.0 / t.data.size)

        _push((out,), bwd)
    return out


# ---------------------------------------------------------------------------
# fused ops (backend kernels)


def affine(x: Tensor, w_x: Tensor, h: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """x @ w_x + h @ w_h + b, the pre-activation of every recurrent cell."""
    if (
        x.data.ndim != 2
        or h.data.ndim != 2
        or x.data.shape[1] != w_x.data.shape[0]
        or h.data.shape[1] != w_h.data.shape[0]
        or w_x.data.shape[1] != w_h.data.shape[1]
        or b.data.shape != (w_x.data.shape[1],)
        or x.data.shape[0] != h.data.shape[0]
    ):
        raise ShapeError(
            "affine: incompatible shapes x%s w_x%s h%s w_h%s b%s"
            % (x.data.shape, w_x.data.shape, h.data.shape, w_h.data.shape, b.data.shape)
        )
    pre = x.data @ w_x.data
    pre += h.data @ w_h.data
    pre += b.data
    out = Tensor(pre)
    if _should_record(x, w_x, h, w_h, b):
        g = _ACTIVE

        def bwd():
            gout = out.grad
            gx = _acc(x)
            if gx is not None:
                gx += gout @ w_x.data.T
            gh = _acc(h)
            if gh is not None:
                gh += gout @ w_h.data.T
            gb = _acc(b)
            if gb is not None:
                gb += gout.sum(axis=0)
            # leaf weight grads are pure accumulations: batch their GEMMs
            # across timesteps (sliced/derived weights stay immediate, since
            # their own backward nodes fire before the deferred pass)
            for w, left in ((w_x, x), (w_h, h)):
                if w.graph is None:
                    if w.requires_grad:
                        g.defer_weight_grad(w, left.data, gout)
                else:
                    gw = _acc(w)
                    if gw is not None:
                        gw += left.data.T @ gout

        _push((out,), bwd)
    return out


def lstm_cell(pre: Tensor, c_prev: Tensor):
    """Fused LSTM gate/candidate computation from stacked pre-activations.

    ``pre`` is B x 4H with column blocks ordered [i, f, o, g].  Returns the
    tensors (i, f, o, g, c_cand); the hidden read-out o*tanh(c_cand) and all
    state assembly (zoneout etc.) are the caller's job.
    """
    if (
        pre.data.ndim != 2
        or c_prev.data.ndim != 2
        or pre.data.shape[1] != 4 * c_prev.data.shape[1]
        or pre.data.shape[0] != c_prev.data.shape[0]
    ):
        raise ShapeError(
            f"lstm_cell: pre {pre.data.shape} incompatible with c_prev {c_prev.data.shape}"
        )
    iv, fv, ov, gv, ccv = K.lstm_cell_fwd(pre.data, c_prev.data)
    i, f, o, g = Tensor(iv), Tensor(fv), Tensor(ov), Tensor(gv)
    c_cand = Tensor(ccv)
    if _should_record(pre, c_prev):

        def bwd():
            gpre = _acc(pre)
            K.lstm_cell_bwd(
                i.data,
                f.data,
                o.data,
                g.data,
                c_prev.data,
                i.grad,
                f.grad,
                o.grad,
                g.grad,
                c_cand.grad,
                gpre,
                _acc(c_prev),
            )

        _push((i, f, o, g, c_cand), bwd)
    return i, f, o, g, c_cand


def tanh_mul(a: Tensor, c: Tensor) -> Tensor:
    """a * tanh(c) in one node (the LSTM hidden read-out shape)."""
    _same_shape(a, c, "tanh_mul")
    hv, tanh_c = K.tanh_mul_fwd(a.data, c.data)
    out = Tensor(hv)
    if _should_record(a, c):

        def bwd():
            K.tanh_mul_bwd(a.data, tanh_c, out.grad, _acc(a), _acc(c))

        _push((out,), bwd)
    return out


def mask_mix(d: Tensor, prev: Tensor, cand: Tensor) -> Tensor:
    """d*prev + (1-d)*cand for a constant 0/1 mask d (no gradient through d)."""
    _same_shape(prev, cand, "mask_mix")
    _same_shape(d, prev, "mask_mix")
    if d.requires_grad or d.graph is not None:
        raise GraphError("mask_mix: masks must be constants, not tracked tensors")
    out = Tensor(K.mask_mix_fwd(d.data, prev.data, cand.data))
    if _should_record(prev, cand):

        def bwd():
            K.mask_mix_bwd(d.data, out.grad, _acc(prev), _acc(cand))

        _push((out,), bwd)
    return out


def lerp(z: float, prev: Tensor, cand: Tensor) -> Tensor:
    """z*prev + (1-z)*cand with a scalar weight (mask expectation at eval)."""
    _same_shape(prev, cand, "lerp")
    out = Tensor(K.lerp_fwd(float(z), prev.data, cand.data))
    if _should_record(prev, cand):

        def bwd():
            K.lerp_bwd(float(z), out.grad, _acc(prev), _acc(cand))

        _push((out,), bwd)
    return out


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood (nats) of integer targets under row softmax."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.data.shape} vs targets {targets.shape}"
        )
    if not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError("softmax_cross_entropy: targets must be integer class indices")
    n_classes = logits.data.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise IndexError(
            f"softmax_cross_entropy: target out of range [0, {n_classes})"
        )
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    loss, probs = K.softmax_xent_fwd(logits.data, targets)
    out = Tensor(np.asarray(loss))
    if _should_record(logits):

        def bwd():
            glogits = _acc(logits)
            K.softmax_xent_bwd(probs, targets, float(out.grad), glogits)

        _push((out,), bwd)
    return out
