"""Stochastic state regularizers: mask sampling and state assembly.

Conventions, fixed once here and relied on everywhere else:

* Zoneout masks ``d`` have d=1 => *preserve* the previous state value
  (state_t = d*state_{t-1} + (1-d)*candidate), drawn Bernoulli(z).
* Dropout masks ``m`` (recurrent / naive cell dropout) have m=1 => *keep*
  the masked term, drawn Bernoulli(1-p) for drop probability p.
* Output-gate reuse uses one zone-style mask d ~ Bernoulli(p): d=1 drops
  the cell update and reuses the previous output gate.
* Masks are constants: no gradient ever flows through a mask.
* ``mode="train"`` applies realized masks; ``mode="eval"`` replaces every
  mask by its expectation, so eval outputs are deterministic convex mixes
  of the preserved and candidate values.

The hidden zoneout update mixes h_{t-1} with o_t * tanh(c_cand) where
c_cand is the *pre-zoneout* cell candidate -- in both train and eval mode --
which is why the cell steps return candidates instead of final states.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .cells import CellState, GRUStep, LSTMStep
from .errors import ConfigError, ShapeError
from .tensor import Tensor

TRAIN = "train"
EVAL = "eval"

MASK_MODES = ("per_step", "per_sequence", "shared_hc", "static_global", "per_timestep_whole_state")


# ---------------------------------------------------------------------------
# mask sampling


@dataclass(frozen=True)
class MaskSpec:
    """Bernoulli mask configuration: P(entry = 1) and the sampling mode."""

    probability: float
    mode: str = "per_step"
    stream: str = "masks"

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"mask probability {self.probability} outside [0, 1]")
        if self.mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {self.mode!r}")


@dataclass
class MaskBatch:
    """A realized 0/1 mask as a constant tensor."""

    d: Tensor

    def __post_init__(self):
        vals = self.d.data
        if not np.all((vals == 0.0) | (vals == 1.0)):
            raise ShapeError("mask entries must be exactly 0 or 1")


def sample_mask(spec: MaskSpec, shape: tuple[int, int], rng: np.random.Generator) -> MaskBatch:
    """One i.i.d. Bernoulli(spec.probability) mask of the given B x H shape."""
    draws = (rng.random(shape) < spec.probability).astype(np.float64)
    return MaskBatch(Tensor(draws))


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator for a named stream, independent of all others."""
    key = np.random.SeedSequence(entropy=(int(seed), zlib.crc32(name.encode("utf-8"))))
    return np.random.Generator(np.random.Philox(key))


class MaskSource:
    """Per-run provider of mask sequences with the sticky modes cached.

    Each named stream gets its own counter-based RNG derived from the run
    seed, so mask draws do not depend on data order or on any other stream.
    ``static_global`` masks are sampled once per (stream, timestep), shared
    by every example, and reused for the whole run.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rngs: dict[str, np.random.Generator] = {}
        self._static: dict[tuple[str, int], np.ndarray] = {}

    def rng(self, stream: str) -> np.random.Generator:
        if stream not in self._rngs:
            self._rngs[stream] = stream_rng(self.seed, stream)
        return self._rngs[stream]

    def sequence_masks(self, spec: MaskSpec, batch: int, hidden: int, steps: int) -> list[MaskBatch]:
        """Masks for one unrolled sequence, one entry per timestep."""
        rng = self.rng(spec.stream)
        if spec.mode in ("per_step", "shared_hc"):
            draws = rng.random((steps, batch, hidden)) < spec.probability
            return [MaskBatch(Tensor(draws[t].astype(np.float64))) for t in range(steps)]
        if spec.mode == "per_sequence":
            one = sample_mask(spec, (batch, hidden), rng)
            return [one] * steps
        if spec.mode == "static_global":
            out = []
            for t in range(steps):
                key = (spec.stream, t)
                if key not in self._static:
                    self._static[key] = (rng.random(hidden) < spec.probability).astype(np.float64)
                out.append(MaskBatch(Tensor(np.tile(self._static[key], (batch, 1)))))
            return out
        if spec.mode == "per_timestep_whole_state":
            draws = rng.random((steps, batch)) < spec.probability
            return [
                MaskBatch(Tensor(np.repeat(draws[t].astype(np.float64)[:, None], hidden, axis=1)))
                for t in range(steps)
            ]
        raise ConfigError(f"unknown mask mode {spec.mode!r}")


# ---------------------------------------------------------------------------
# regularizer configuration


@dataclass(frozen=True)
class Zoneout:
    z_c: float
    z_h: float
    shared_mask: bool = False
    name = "zoneout"


@dataclass(frozen=True)
class RecurrentDropout:
    """Zero-mask the additive input-gate (LSTM) / update-gate (GRU) term."""

    p: float
    name = "recurrent_dropout"


@dataclass(frozen=True)
class NaiveCellDropout:
    """Zero-mask the whole cell/state candidate."""

    p: float
    name = "naive_cell_dropout"


@dataclass(frozen=True)
class OutputGateReuse:
    """Recurrent dropout whose keep mask also mixes o_t with o_{t-1}."""

    p: float
    name = "output_gate_reuse"


@dataclass(frozen=True)
class StochasticDepth:
    """Zone out an entire timestep per example with probability z."""

    z: float
    name = "stochastic_depth"


StateRule = Union[Zoneout, RecurrentDropout, NaiveCellDropout, OutputGateReuse, StochasticDepth, None]

STATE_RULE_NAMES = (
    "none",
    "zoneout",
    "recurrent_dropout",
    "naive_cell_dropout",
    "output_gate_reuse",
    "stochastic_depth",
)


@dataclass(frozen=True)
class RegularizerConfig:
    """What to apply during training.

    Exactly one state-assembly rule (or none) can be active; weight noise and
    the norm stabilizer stack freely on top of any of them.
    """

    state_rule: StateRule = None
    weight_noise_sigma: float = 0.0
    norm_stabilizer_beta: float = 0.0
    mask_mode: str = "per_step"

    def __post_init__(self):
        if self.weight_noise_sigma < 0:
            raise ConfigError("weight_noise_sigma must be >= 0")
        if self.norm_stabilizer_beta < 0:
            raise ConfigError("norm_stabilizer_beta must be >= 0")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {self.mask_mode!r}")
        rule = self.state_rule
        if isinstance(rule, Zoneout):
            for v in (rule.z_c, rule.z_h):
                if not 0.0 <= v <= 1.0:
                    raise ConfigError(f"zoneout probability {v} outside [0, 1]")
            if rule.shared_mask and rule.z_c != rule.z_h:
                raise ConfigError("shared-mask zoneout requires z_c == z_h")
        elif isinstance(rule, (RecurrentDropout, NaiveCellDropout, OutputGateReuse)):
            if not 0.0 <= rule.p <= 1.0:
                raise ConfigError(f"drop probability {rule.p} outside [0, 1]")
        elif isinstance(rule, StochasticDepth):
            if not 0.0 <= rule.z <= 1.0:
                raise ConfigError(f"stochastic depth probability {rule.z} outside [0, 1]")
        elif rule is not None:
            raise ConfigError(f"unknown state rule {rule!r}")

    @classmethod
    def from_parts(cls, parts, mask_mode: str = "per_step") -> "RegularizerConfig":
        """Combine a list of components, rejecting two state-assembly rules."""
        state_rule = None
        sigma = 0.0
        beta = 0.0
        for part in parts:
            if isinstance(part, tuple) and part[0] == "weight_noise":
                sigma = part[1]
            elif isinstance(part, tuple) and part[0] == "norm_stabilizer":
                beta = part[1]
            else:
                if state_rule is not None and part is not None:
                    raise ConfigError(
                        "at most one state-assembly regularizer may be active at a time"
                    )
                state_rule = part
        return cls(state_rule, sigma, beta, mask_mode)

    @property
    def label(self) -> str:
        bits = [self.state_rule.name if self.state_rule is not None else "none"]
        if self.weight_noise_sigma > 0:
            bits.append("weight_noise")
        if self.norm_stabilizer_beta > 0:
            bits.append("norm_stabilizer")
        return "+".join(bits)


# ---------------------------------------------------------------------------
# state assembly


def zoneout_lstm_assemble(
    gates: LSTMStep,
    c_cand: Tensor,
    h_cand: Tensor,
    state_prev: CellState,
    d_c: MaskBatch | None,
    d_h: MaskBatch | None,
    mode: str,
    z_c: float,
    z_h: float,
) -> CellState:
    """Zoneout on an LSTM: per-unit stochastic identity connections.

    Train: c_t = d_c*c_{t-1} + (1-d_c)*c_cand and
    h_t = d_h*h_{t-1} + (1-d_h)*(o*tanh(c_cand)); note h mixes against the
    *candidate* cell, not the zoned one.  Eval replaces d_c, d_h by z_c, z_h.
    """
    _check_mode(mode, d_c, d_h)
    if mode == TRAIN:
        c_t = T.mask_mix(d_c.d, state_prev.c, c_cand)
        h_t = T.mask_mix(d_h.d, state_prev.h, h_cand)
    else:
        c_t = T.lerp(z_c, state_prev.c, c_cand)
        h_t = T.lerp(z_h, state_prev.h, h_cand)
    return CellState(h_t, c_t)


def zoneout_simple_assemble(
    h_cand: Tensor, h_prev: Tensor, d_h: MaskBatch | None, mode: str, z_h: float
) -> Tensor:
    """Zoneout for single-state cells (GRU, tanh-RNN)."""
    _check_mode(mode, d_h)
    if mode == TRAIN:
        return T.mask_mix(d_h.d, h_prev, h_cand)
    return T.lerp(z_h, h_prev, h_cand)


def recurrent_dropout_assemble(
    gates: LSTMStep, state_prev: CellState, m: MaskBatch | None, mode: str, p: float
) -> CellState:
    """Zero-mask the input-gate contribution: c_t = f*c_{t-1} + m*i*g.

    With m = 0 there is no additive contribution and the cell decays by its
    forget gate.  Eval: c_t = f*c_{t-1} + (1-p)*i*g (no inverted train-time
    scaling anywhere in this module; eval takes expectations instead).
    """
    _check_mode(mode, m)
    ig = T.mul(gates.i, gates.g)
    if mode == TRAIN:
        c_t = T.muladd(gates.f, state_prev.c, m.d, ig)
    else:
        c_t = T.add(T.mul(gates.f, state_prev.c), T.scale(ig, 1.0 - p))
    return CellState(T.tanh_mul(gates.o, c_t), c_t)


def recurrent_dropout_gru_assemble(
    step: GRUStep, h_prev: Tensor, m: MaskBatch | None, mode: str, p: float
) -> Tensor:
    """GRU form: zero-mask the update gate, so masked units keep h_{t-1}."""
    _check_mode(mode, m)
    u_eff = T.mul(m.d, step.u) if mode == TRAIN else T.scale(step.u, 1.0 - p)
    return T.add(T.mul(T.one_minus(u_eff), h_prev), T.mul(u_eff, step.cand))


def naive_cell_dropout_assemble(
    gates: LSTMStep,
    c_cand: Tensor,
    state_prev: CellState,
    m: MaskBatch | None,
    mode: str,
    p: float,
) -> CellState:
    """Zero-mask the whole cell candidate: c_t = m*(f*c_{t-1} + i*g)."""
    _check_mode(mode, m)
    c_t = T.mul(m.d, c_cand) if mode == TRAIN else T.scale(c_cand, 1.0 - p)
    return CellState(T.tanh_mul(gates.o, c_t), c_t)


def naive_state_dropout_assemble(
    h_cand: Tensor, m: MaskBatch | None, mode: str, p: float
) -> Tensor:
    """Single-state analogue: h_t = m * h_cand."""
    _check_mode(mode, m)
    return T.mul(m.d, h_cand) if mode == TRAIN else T.scale(h_cand, 1.0 - p)


def output_gate_reuse_assemble(
    gates: LSTMStep,
    o_prev: Tensor,
    state_prev: CellState,
    d: MaskBatch | None,
    mode: str,
    p: float,
) -> CellState:
    """Recurrent dropout whose single mask also zones out the output gates.

    The mask follows this module's unified polarity: d ~ Bernoulli(p) with
    d=1 meaning "zone out", i.e. the cell update is dropped *and* the stale
    output gate is reused, so an un-updated cell is not exposed through a
    fresh gate.  Train:
    c_t = f*c_{t-1} + (1-d)*i*g and h_t = (d*o_{t-1} + (1-d)*o_t) * tanh(c_t).
    Eval replaces d by its expectation p: the input-gate term keeps with
    probability (1-p) and the o-mix becomes p*o_{t-1} + (1-p)*o_t.
    """
    if o_prev is None:
        raise ShapeError("output_gate_reuse needs the previous output gate o_prev")
    _check_mode(mode, d)
    ig = T.mul(gates.i, gates.g)
    if mode == TRAIN:
        keep = Tensor(1.0 - d.d.data)
        c_t = T.muladd(gates.f, state_prev.c, keep, ig)
        o_mix = T.mask_mix(d.d, o_prev, gates.o)
    else:
        c_t = T.add(T.mul(gates.f, state_prev.c), T.scale(ig, 1.0 - p))
        o_mix = T.lerp(p, o_prev, gates.o)
    return CellState(T.tanh_mul(o_mix, c_t), c_t)


def stochastic_depth_assemble(
    cand_state: CellState,
    state_prev: CellState,
    d: MaskBatch | None,
    mode: str,
    z: float,
) -> CellState:
    """Zone out the whole state vector of drawn examples for one timestep.

    The mask holds one Bernoulli(z) draw per example broadcast across units;
    a drawn example keeps (h_{t-1}, c_{t-1}) bitwise and its input is
    effectively ignored for that step.
    """
    _check_mode(mode, d)
    if mode == TRAIN:
        h_t = T.mask_mix(d.d, state_prev.h, cand_state.h)
        c_t = (
            T.mask_mix(d.d, state_prev.c, cand_state.c) if cand_state.c is not None else None
        )
    else:
        h_t = T.lerp(z, state_prev.h, cand_state.h)
        c_t = T.lerp(z, state_prev.c, cand_state.c) if cand_state.c is not None else None
    return CellState(h_t, c_t)


def _check_mode(mode: str, *masks) -> None:
    if mode == TRAIN:
        if any(m is None for m in masks):
            raise ShapeError("train mode requires realized masks")
    elif mode == EVAL:
        pass
    else:
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# weight noise and norm stabilizer


class WeightNoise:
    """Additive Gaussian N(0, sigma^2) weight perturbation for one step.

    Noise is resampled per training batch; ``restore`` puts the clean values
    back so the optimizer updates the unperturbed weights (gradients with
    respect to the noisy weights equal those for the clean weights, the
    perturbation being an additive constant).
    """

    def __init__(self, sigma: float, rng: np.random.Generator):
        if sigma < 0:
            raise ConfigError("weight noise sigma must be >= 0")
        self.sigma = sigma
        self.rng = rng
        self._saved: list[tuple[Tensor, np.ndarray]] = []

    def perturb(self, tensors: list[Tensor]) -> None:
        if self.sigma == 0.0:
            return
        for t in tensors:
            self._saved.append((t, t.data.copy()))
            t.data += self.rng.normal(0.0, self.sigma, size=t.data.shape)

    def restore(self) -> None:
        for t, clean in self._saved:
            t.data[...] = clean
        self._saved.clear()


def apply_weight_noise(tensors: list[Tensor], sigma: float, rng: np.random.Generator) -> WeightNoise:
    """Perturb in place, returning the handle whose restore() undoes it."""
    noise = WeightNoise(sigma, rng)
    noise.perturb(tensors)
    return noise


def norm_stabilizer_penalty(h_seq: list[Tensor], beta: float, h_prev: Tensor | None = None) -> Tensor:
    """beta * (1/T) * sum_t (||h_t|| - ||h_{t-1}||)^2, meaned over the batch.

    Norms are per batch element; h_0 is the initial state (zeros unless a
    carried state is supplied).
    """
    if not h_seq:
        raise ShapeError("norm_stabilizer_penalty: empty state sequence")
    steps = len(h_seq)
    batch = h_seq[0].shape[0]
    if h_prev is None:
        prev_norm = Tensor(np.zeros(batch))
    else:
        prev_norm = T.sqrt(T.sum_rows(T.mul(h_prev, h_prev)))
    acc = None
    for h in h_seq:
        norm = T.sqrt(T.sum_rows(T.mul(h, h)))
        diff = T.sub(norm, prev_norm)
        sq = T.mul(diff, diff)
        acc = sq if acc is None else T.add(acc, sq)
        prev_norm = norm
    return T.scale(T.mean_all(acc), beta / steps)
