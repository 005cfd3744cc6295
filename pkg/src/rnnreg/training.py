"""Optimizers, gradient clipping, LR schedules, metrics, epoch drivers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError
from .model import SequenceModel, sequence_nll
from .regularizers import EVAL, TRAIN, MaskSource, RegularizerConfig, WeightNoise
from .tensor import Graph, Tensor, backward


@dataclass
class ClipRule:
    """Gradient clipping: global L2 norm rescaling or per-entry value clamp."""

    max_norm: float
    kind: str = "norm"

    def __post_init__(self):
        if self.max_norm <= 0:
            raise ConfigError("clip threshold must be > 0")
        if self.kind not in ("norm", "value"):
            raise ConfigError(f"unknown clip kind {self.kind!r}")


def clip_gradients(grads: list[np.ndarray], rule: ClipRule | None) -> float:
    """Scale gradients in place per the rule; returns the pre-clip global norm.

    Raises NumericsError on non-finite gradients (run abort).
    """
    total = 0.0
    for g in grads:
        flat = g.reshape(-1)
        total += float(np.dot(flat, flat))
    norm = math.sqrt(total) if np.isfinite(total) else float("nan")
    if not np.isfinite(norm):
        raise NumericsError("non-finite gradient encountered")
    if rule is None:
        return norm
    if rule.kind == "norm":
        if norm > rule.max_norm:
            # multiply first, divide last: keeps e.g. clip([3,4], 1) exactly [0.6, 0.8]
            for g in grads:
                g *= rule.max_norm
                g /= norm
    else:
        for g in grads:
            np.clip(g, -rule.max_norm, rule.max_norm, out=g)
    return norm


@dataclass
class LRSchedule:
    """Constant rate through ``decay_start`` epochs, then divide by
    ``decay_factor`` each further epoch (factor 1 = no decay)."""

    base: float
    decay_factor: float = 1.0
    decay_start: int = 0

    def __post_init__(self):
        if self.base <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.decay_factor < 1.0:
            raise ConfigError("decay factor must be >= 1 (divide-style decay)")

    def rate(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        if self.decay_factor == 1.0 or self.decay_start <= 0 or epoch <= self.decay_start:
            return self.base
        return self.base / self.decay_factor ** (epoch - self.decay_start)


class SGD:
    def __init__(self, lr: float):
        if lr <= 0:
            raise ConfigError("learning rate must be > 0")
        self.lr = lr

    def step(self, params: list[Tensor], lr: float | None = None) -> None:
        rate = self.lr if lr is None else lr
        for p in params:
            if p.grad is not None:
                p.data -= rate * p.grad


class Adam:
    """Bias-corrected first/second-moment update (default 0.9/0.999/1e-8)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be > 0")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[Tensor], lr: float | None = None) -> None:
        rate = self.lr if lr is None else lr
        if self._m is None:
            self._m = [np.zeros_like(p.data) for p in params]
            self._v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


class RMSProp:
    """v <- decay*v + (1-decay)*g^2; p <- p - lr*g/(sqrt(v)+eps)."""

    def __init__(self, lr: float, decay: float = 0.5, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if not 0.0 <= decay < 1.0:
            raise ConfigError("rmsprop decay must be in [0, 1)")
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[Tensor], lr: float | None = None) -> None:
        rate = self.lr if lr is None else lr
        if self._v is None:
            self._v = [np.zeros_like(p.data) for p in params]
        for p, v in zip(params, self._v):
            g = p.grad
            if g is None:
                continue
            v *= self.decay
            v += (1.0 - self.decay) * (g * g)
            p.data -= rate * g / (np.sqrt(v) + self.eps)


def make_optimizer(kind: str, lr: float, **kwargs):
    table = {"sgd": SGD, "adam": Adam, "rmsprop": RMSProp}
    if kind not in table:
        raise ConfigError(f"unknown optimizer {kind!r}")
    return table[kind](lr, **kwargs)


# ---------------------------------------------------------------------------
# metrics


def metrics(nll_nats: float) -> tuple[float, float]:
    """(bits-per-symbol, perplexity) from a mean NLL in nats.

    Perplexity saturates to inf once exp overflows float64 (diverged runs
    still need parseable records)."""
    if nll_nats < 0:
        raise NumericsError(f"negative NLL: {nll_nats}")
    try:
        ppl = math.exp(nll_nats)
    except OverflowError:
        ppl = float("inf")
    return nll_nats / math.log(2.0), ppl


def classification_error(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax mispredictions; ties break to the lowest class."""
    pred = logits.argmax(axis=1)
    return float(np.mean(pred != np.asarray(labels)))


@dataclass
class RunRecord:
    epoch: int
    split: str
    nll_nats: float
    bpc: float
    perplexity: float
    error_rate: float
    grad_norm_preclip: float
    wall_s: float

    CSV_HEADER = "epoch,split,nll_nats,bpc,perplexity,error_rate,grad_norm_preclip,wall_s"

    def csv_row(self) -> str:
        vals = [
            str(self.epoch),
            self.split,
            repr(float(self.nll_nats)),
            repr(float(self.bpc)),
            repr(float(self.perplexity)),
            repr(float(self.error_rate)),
            repr(float(self.grad_norm_preclip)),
            repr(float(self.wall_s)),
        ]
        return ",".join(vals)

    @classmethod
    def from_nll(cls, epoch, split, nll, error_rate=float("nan"),
                 grad_norm=float("nan"), wall_s=0.0) -> "RunRecord":
        bpc, ppl = metrics(nll)
        return cls(epoch, split, nll, bpc, ppl, error_rate, grad_norm, wall_s)


# ---------------------------------------------------------------------------
# epoch drivers


@dataclass
class EpochStats:
    nll: float
    error_rate: float
    grad_norm: float
    batches: int


def train_epoch(
    model: SequenceModel,
    batches,
    reg: RegularizerConfig,
    mask_source: MaskSource,
    optimizer,
    clip_rule: ClipRule | None,
    lr: float | None = None,
    noise_rng: np.random.Generator | None = None,
    stateful: bool = False,
    max_batches: int = 0,
) -> EpochStats:
    """One pass over the batches with masked training-mode forwards.

    With ``stateful`` the final states of each batch seed the next one
    (detached, truncated BPTT); otherwise every batch starts from zeros.
    """
    params = model.param_tensors()
    noise = None
    if reg.weight_noise_sigma > 0:
        if noise_rng is None:
            raise ConfigError("weight noise needs a noise RNG")
        noise = WeightNoise(reg.weight_noise_sigma, noise_rng)
    carried = None
    total_nll = 0.0
    total_norm = 0.0
    err_events = 0.0
    err_count = 0
    n = 0
    for inputs, targets in batches:
        if max_batches and n >= max_batches:
            break
        model.zero_grad()
        if noise is not None:
            noise.perturb(params)
        try:
            with Graph():
                out = sequence_nll(model, inputs, targets, reg, TRAIN, mask_source, carried)
                if not np.isfinite(out.loss.item()):
                    raise NumericsError(f"non-finite loss at batch {n}")
                backward(out.loss)
        finally:
            if noise is not None:
                noise.restore()
        grads = [p.grad for p in params if p.grad is not None]
        try:
            total_norm += clip_gradients(grads, clip_rule)
        except NumericsError as exc:
            raise NumericsError(f"{exc} (batch {n})") from None
        optimizer.step(params, lr=lr)
        if stateful:
            carried = [st.detach() for st in out.final_states]
        total_nll += out.nll
        if np.asarray(targets).ndim == 1:
            err_events += classification_error(out.logits, targets) * len(targets)
            err_count += len(targets)
        n += 1
    if n == 0:
        raise ConfigError("train_epoch: no batches")
    err = err_events / err_count if err_count else float("nan")
    return EpochStats(total_nll / n, err, total_norm / n, n)


def eval_epoch(
    model: SequenceModel,
    batches,
    reg: RegularizerConfig,
    stateful: bool = False,
) -> EpochStats:
    """Deterministic expectation-mode pass; no graphs are recorded."""
    carried = None
    total_nll = 0.0
    total_syms = 0
    err_events = 0.0
    err_count = 0
    n = 0
    for inputs, targets in batches:
        out = sequence_nll(model, inputs, targets, reg, EVAL, None, carried)
        if stateful:
            carried = [st.detach() for st in out.final_states]
        syms = np.asarray(targets).size
        total_nll += out.nll * syms
        total_syms += syms
        if np.asarray(targets).ndim == 1:
            err_events += classification_error(out.logits, targets) * len(targets)
            err_count += len(targets)
        n += 1
    if n == 0:
        raise ConfigError("eval_epoch: no batches")
    err = err_events / err_count if err_count else float("nan")
    return EpochStats(total_nll / total_syms, err, float("nan"), n)
