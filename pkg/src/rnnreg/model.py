"""Sequence models: cell stacks, regularized unrolling, loss assembly.

A :class:`SequenceModel` is a stack of identical cells plus a linear
read-out.  :func:`sequence_nll` unrolls it over a batch, applies the
configured state regularizer at every timestep and layer (independent mask
streams per layer), and returns the mean NLL per predicted symbol plus the
retained per-timestep states needed by the gradient-flow diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cells as C
from . import regularizers as R
from . import tensor as T
from .cells import CellState
from .errors import ConfigError, ShapeError
from .regularizers import (
    EVAL,
    TRAIN,
    MaskBatch,
    MaskSource,
    MaskSpec,
    NaiveCellDropout,
    OutputGateReuse,
    RecurrentDropout,
    RegularizerConfig,
    StochasticDepth,
    Zoneout,
)
from .tensor import Tensor

CELL_KINDS = ("lstm", "gru", "rnn")


@dataclass
class SequenceModel:
    cell_kind: str
    cells: list  # CellParams per layer
    w_out: Tensor
    b_out: Tensor
    input_kind: str  # "onehot" (integer codes) or "scalar" (one float per step)

    @property
    def hidden_size(self) -> int:
        return self.cells[0].hidden_size

    @property
    def input_size(self) -> int:
        return self.cells[0].input_size

    @property
    def output_size(self) -> int:
        return self.w_out.shape[1]

    @property
    def layers(self) -> int:
        return len(self.cells)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for idx, cell in enumerate(self.cells):
            out.extend((f"cell{idx}.{name}", t) for name, t in cell.tensors())
        out.append(("w_out", self.w_out))
        out.append(("b_out", self.b_out))
        return out

    def param_tensors(self) -> list[Tensor]:
        return [t for _, t in self.parameters()]

    def zero_grad(self) -> None:
        for t in self.param_tensors():
            t.grad = None

    def initial_states(self, batch: int) -> list[CellState]:
        return [C.initial_state(self.cell_kind, batch, self.hidden_size) for _ in self.cells]


def build_model(
    cell_kind: str,
    layers: int,
    input_size: int,
    hidden_size: int,
    output_size: int,
    rng: np.random.Generator,
    input_kind: str = "onehot",
    scheme: str = "uniform",
    scale: float = 0.04,
    forget_bias: float = 1.0,
) -> SequenceModel:
    if cell_kind not in CELL_KINDS:
        raise ConfigError(f"unknown cell kind {cell_kind!r}")
    if layers < 1:
        raise ConfigError("layers must be >= 1")
    cell_list = []
    for idx in range(layers):
        in_size = input_size if idx == 0 else hidden_size
        cell_list.append(
            C.init_params(
                cell_kind, in_size, hidden_size, rng,
                scheme=scheme, scale=scale, forget_bias=forget_bias,
            )
        )
    w_out = T.parameter(rng.uniform(-scale, scale, size=(hidden_size, output_size)))
    b_out = T.parameter(np.zeros(output_size))
    return SequenceModel(cell_kind, cell_list, w_out, b_out, input_kind)


# ---------------------------------------------------------------------------
# mask planning


@dataclass
class StepMasks:
    d_c: MaskBatch | None = None
    d_h: MaskBatch | None = None
    m: MaskBatch | None = None
    d_depth: MaskBatch | None = None


def validate_rule_for_cell(rule, cell_kind: str) -> None:
    """Reject combinations the defining equations do not cover."""
    if isinstance(rule, OutputGateReuse) and cell_kind != "lstm":
        raise ConfigError("output_gate_reuse needs an LSTM (it mixes output gates)")
    if isinstance(rule, RecurrentDropout) and cell_kind == "rnn":
        raise ConfigError(
            "recurrent_dropout masks an input/update gate, which a vanilla "
            "tanh-RNN does not have; use naive_cell_dropout instead"
        )


def plan_masks(
    reg: RegularizerConfig,
    source: MaskSource | None,
    batch: int,
    hidden: int,
    steps: int,
    layer: int,
    mode: str,
) -> list[StepMasks] | None:
    """Realized masks for one layer of one unrolled batch (train mode only)."""
    rule = reg.state_rule
    if mode == EVAL or rule is None:
        return None
    if source is None:
        raise ShapeError("train mode requires a MaskSource")
    prefix = f"masks/L{layer}"
    if isinstance(rule, Zoneout):
        if rule.shared_mask:
            spec = MaskSpec(rule.z_c, "shared_hc", f"{prefix}/zoneout_shared")
            shared = source.sequence_masks(spec, batch, hidden, steps)
            return [StepMasks(d_c=mb, d_h=mb) for mb in shared]
        mode_name = reg.mask_mode
        spec_c = MaskSpec(rule.z_c, mode_name, f"{prefix}/zoneout_c")
        spec_h = MaskSpec(rule.z_h, mode_name, f"{prefix}/zoneout_h")
        masks_c = source.sequence_masks(spec_c, batch, hidden, steps)
        masks_h = source.sequence_masks(spec_h, batch, hidden, steps)
        return [StepMasks(d_c=mc, d_h=mh) for mc, mh in zip(masks_c, masks_h)]
    if isinstance(rule, (RecurrentDropout, NaiveCellDropout)):
        spec = MaskSpec(1.0 - rule.p, reg.mask_mode, f"{prefix}/keep")
        return [StepMasks(m=mb) for mb in source.sequence_masks(spec, batch, hidden, steps)]
    if isinstance(rule, OutputGateReuse):
        # unified polarity: d=1 zones out (drops the update, reuses o_prev)
        spec = MaskSpec(rule.p, reg.mask_mode, f"{prefix}/ogr_zone")
        return [StepMasks(m=mb) for mb in source.sequence_masks(spec, batch, hidden, steps)]
    if isinstance(rule, StochasticDepth):
        spec = MaskSpec(rule.z, "per_timestep_whole_state", f"{prefix}/depth")
        return [StepMasks(d_depth=mb) for mb in source.sequence_masks(spec, batch, hidden, steps)]
    raise ConfigError(f"unknown state rule {rule!r}")


# ---------------------------------------------------------------------------
# unrolling


@dataclass
class LayerCarry:
    state: CellState
    o_prev: Tensor | None = None  # only output_gate_reuse uses this


def step_layer(
    cell_kind: str,
    params,
    x_t: Tensor,
    carry: LayerCarry,
    rule,
    masks_t: StepMasks | None,
    mode: str,
) -> LayerCarry:
    """One timestep of one layer: raw step + regularized state assembly."""
    state = carry.state
    if cell_kind == "lstm":
        step = C.lstm_step(params, x_t, state)
        if rule is None:
            return LayerCarry(CellState(step.h_cand, step.c_cand))
        if isinstance(rule, Zoneout):
            new = R.zoneout_lstm_assemble(
                step, step.c_cand, step.h_cand, state,
                masks_t.d_c if masks_t else None,
                masks_t.d_h if masks_t else None,
                mode, rule.z_c, rule.z_h,
            )
            return LayerCarry(new)
        if isinstance(rule, RecurrentDropout):
            new = R.recurrent_dropout_assemble(
                step, state, masks_t.m if masks_t else None, mode, rule.p
            )
            return LayerCarry(new)
        if isinstance(rule, NaiveCellDropout):
            new = R.naive_cell_dropout_assemble(
                step, step.c_cand, state, masks_t.m if masks_t else None, mode, rule.p
            )
            return LayerCarry(new)
        if isinstance(rule, OutputGateReuse):
            o_prev = carry.o_prev
            if o_prev is None:
                o_prev = Tensor(np.ones_like(step.o.data))  # o_0 := 1 (neutral gate)
            new = R.output_gate_reuse_assemble(
                step, o_prev, state, masks_t.m if masks_t else None, mode, rule.p
            )
            return LayerCarry(new, o_prev=step.o)
        if isinstance(rule, StochasticDepth):
            cand = CellState(step.h_cand, step.c_cand)
            new = R.stochastic_depth_assemble(
                cand, state, masks_t.d_depth if masks_t else None, mode, rule.z
            )
            return LayerCarry(new)
        raise ConfigError(f"unknown state rule {rule!r}")

    # single-state cells
    if cell_kind == "gru":
        gstep = C.gru_step(params, x_t, state.h)
        h_cand = gstep.h_cand
    else:
        gstep = None
        h_cand = C.rnn_step(params, x_t, state.h)
    if rule is None:
        return LayerCarry(CellState(h_cand))
    if isinstance(rule, Zoneout):
        h_new = R.zoneout_simple_assemble(
            h_cand, state.h, masks_t.d_h if masks_t else None, mode, rule.z_h
        )
        return LayerCarry(CellState(h_new))
    if isinstance(rule, RecurrentDropout):
        if gstep is None:
            raise ConfigError("recurrent_dropout is undefined for tanh-RNN cells")
        h_new = R.recurrent_dropout_gru_assemble(
            gstep, state.h, masks_t.m if masks_t else None, mode, rule.p
        )
        return LayerCarry(CellState(h_new))
    if isinstance(rule, NaiveCellDropout):
        h_new = R.naive_state_dropout_assemble(
            h_cand, masks_t.m if masks_t else None, mode, rule.p
        )
        return LayerCarry(CellState(h_new))
    if isinstance(rule, StochasticDepth):
        new = R.stochastic_depth_assemble(
            CellState(h_cand), state, masks_t.d_depth if masks_t else None, mode, rule.z
        )
        return LayerCarry(new)
    raise ConfigError(f"state rule {rule!r} is not defined for cell kind {cell_kind!r}")


@dataclass
class UnrollResult:
    top_states: list[CellState]  # per timestep, top layer
    final_carries: list[LayerCarry]  # per layer, attached to the live graph


def unroll(
    model: SequenceModel,
    xs: list[Tensor],
    reg: RegularizerConfig,
    mode: str,
    mask_source: MaskSource | None,
    state0: list[CellState] | None = None,
    mask_plans: list[list[StepMasks]] | None = None,
) -> UnrollResult:
    rule = reg.state_rule
    validate_rule_for_cell(rule, model.cell_kind)
    steps = len(xs)
    batch = xs[0].shape[0]
    if state0 is None:
        state0 = model.initial_states(batch)
    carries = [LayerCarry(st) for st in state0]
    if mask_plans is not None:
        plans = mask_plans  # pre-sampled (frozen) masks, one plan per layer
    else:
        plans = [
            plan_masks(reg, mask_source, batch, model.hidden_size, steps, layer, mode)
            for layer in range(model.layers)
        ]
    top_states: list[CellState] = []
    for t in range(steps):
        inp = xs[t]
        for layer in range(model.layers):
            masks_t = plans[layer][t] if plans[layer] is not None else None
            carries[layer] = step_layer(
                model.cell_kind, model.cells[layer], inp, carries[layer], rule, masks_t, mode
            )
            inp = carries[layer].state.h
        top_states.append(carries[-1].state)
    return UnrollResult(top_states, carries)


# ---------------------------------------------------------------------------
# loss assembly


@dataclass
class SequenceLoss:
    loss: Tensor  # scalar, nats per predicted symbol (+ penalty if configured)
    nll: float  # task NLL component only
    logits: np.ndarray  # detached values, rows ordered timestep-major
    top_states: list[CellState]
    final_states: list[CellState]  # still attached; detach() before carrying


def encode_inputs(model: SequenceModel, inputs: np.ndarray) -> list[Tensor]:
    """Per-timestep input tensors from a B x T batch of codes or pixels."""
    batch, steps = inputs.shape
    xs = []
    if model.input_kind == "onehot":
        rows = np.arange(batch)
        for t in range(steps):
            x = np.zeros((batch, model.input_size))
            x[rows, inputs[:, t]] = 1.0
            xs.append(Tensor(x))
    else:
        for t in range(steps):
            xs.append(Tensor(np.ascontiguousarray(inputs[:, t : t + 1], dtype=np.float64)))
    return xs


def sequence_nll(
    model: SequenceModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    reg: RegularizerConfig,
    mode: str,
    mask_source: MaskSource | None = None,
    state0: list[CellState] | None = None,
    mask_plans: list[list[StepMasks]] | None = None,
) -> SequenceLoss:
    """Mean NLL per predicted symbol over one unrolled batch.

    2-D targets (B x T) mean next-symbol prediction at every step; 1-D
    targets (B) mean classification from the final state.  Adds the norm
    stabilizer penalty when configured.
    """
    xs = encode_inputs(model, inputs)
    result = unroll(model, xs, reg, mode, mask_source, state0, mask_plans=mask_plans)
    hs = [st.h for st in result.top_states]
    targets = np.asarray(targets)
    if targets.ndim == 2:
        if targets.shape != (inputs.shape[0], len(xs)):
            raise ShapeError(
                f"sequence targets {targets.shape} misaligned with inputs {inputs.shape}"
            )
        h_cat = T.concat_rows(hs)
        logits = T.add_bias(T.matmul(h_cat, model.w_out), model.b_out)
        flat_targets = targets.T.reshape(-1)  # timestep-major, matching concat_rows
        loss = T.softmax_cross_entropy(logits, flat_targets)
    elif targets.ndim == 1:
        if targets.shape[0] != inputs.shape[0]:
            raise ShapeError("classification targets misaligned with batch size")
        logits = T.add_bias(T.matmul(hs[-1], model.w_out), model.b_out)
        loss = T.softmax_cross_entropy(logits, targets)
    else:
        raise ShapeError("targets must be 1-D (labels) or 2-D (next-symbol)")
    nll = loss.item()
    if reg.norm_stabilizer_beta > 0:
        h_prev = state0[-1].h if state0 is not None else None
        penalty = R.norm_stabilizer_penalty(hs, reg.norm_stabilizer_beta, h_prev)
        loss = T.add(loss, penalty)
    return SequenceLoss(loss, nll, logits.data, result.top_states, [c.state for c in result.final_carries])
