"""Gradient-flow profiling across timesteps and the finite-difference checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ShapeError
from .model import SequenceModel, sequence_nll
from .regularizers import TRAIN, MaskSource, RegularizerConfig
from .tensor import Graph, Tensor, backward


@dataclass
class GradientFlowProfile:
    """Per-timestep share of state-gradient mass, normalized to sum to 1."""

    values: np.ndarray  # length T, entries >= 0, sum == 1
    target: str  # "cell" or "hidden"
    label: str


def gradient_flow(
    model: SequenceModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    reg: RegularizerConfig,
    mask_source: MaskSource,
    target: str = "cell",
) -> GradientFlowProfile:
    """Average gradient norms ||dL/dstate_t|| per timestep, normalized.

    Runs one train-mode forward (masks sampled from ``mask_source``, so a
    fixed seed makes repeated calls bitwise identical), one backward, then
    takes the per-example L2 norm of each retained state adjoint, means it
    over the batch, and normalizes the T values by their sum.
    """
    if target not in ("cell", "hidden"):
        raise ShapeError(f"gradient_flow target must be cell or hidden, got {target!r}")
    if len(inputs) == 0:
        raise ShapeError("gradient_flow: empty batch")
    with Graph():
        out = sequence_nll(model, inputs, targets, reg, TRAIN, mask_source)
        if target == "cell":
            if out.top_states[0].c is None:
                raise ShapeError("cell-gradient profile needs an LSTM")
            tracked = [st.c for st in out.top_states]
        else:
            tracked = [st.h for st in out.top_states]
        backward(out.loss, retain=tracked)
    raw = np.empty(len(tracked))
    for t, tens in enumerate(tracked):
        if tens.grad is None:
            raw[t] = 0.0
        else:
            raw[t] = float(np.linalg.norm(tens.grad, axis=1).mean())
    total = raw.sum()
    if not np.isfinite(total):
        raise NumericsError("non-finite gradient norms in flow profile")
    if total == 0.0:
        raise NumericsError("degenerate gradient-flow profile: all norms zero")
    return GradientFlowProfile(raw / total, target, reg.label)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    tolerance: float
    passed: bool
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} "
            f"(worst: {self.worst_param}[{self.worst_index}], tol={self.tolerance:g})"
        )


def finite_diff_check(
    fn,
    params: list[tuple[str, Tensor]],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> FiniteDiffReport:
    """Central-difference check of the analytic gradients of ``fn``.

    ``fn`` must build and return a scalar loss tensor and be deterministic
    across calls (freeze any masks/noise beforehand).  Relative error is
    |analytic - numeric| / max(1, |analytic| + |numeric|), maximized over
    every entry of every listed parameter.
    """
    for _, p in params:
        p.grad = None
    with Graph():
        loss = fn()
        backward(loss)
    if not np.isfinite(loss.item()):
        raise NumericsError("finite_diff_check: non-finite loss")
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params
    }

    worst = (-1.0, "", -1)
    per_param: dict[str, float] = {}
    for name, p in params:
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        local = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = fn().item()
            flat[k] = orig - step
            f_minus = fn().item()
            flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericsError(f"finite_diff_check: non-finite loss perturbing {name}[{k}]")
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(a_flat[k] - numeric) / max(1.0, abs(a_flat[k]) + abs(numeric))
            if rel > local:
                local = rel
            if rel > worst[0]:
                worst = (rel, name, k)
        per_param[name] = local
    max_rel, worst_name, worst_idx = worst
    return FiniteDiffReport(
        max_rel_error=max_rel,
        worst_param=worst_name,
        worst_index=worst_idx,
        tolerance=tolerance,
        passed=max_rel < tolerance,
        per_param=per_param,
    )
