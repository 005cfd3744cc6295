"""Run configuration: flat key=value files with CLI overrides.

Unknown keys are rejected (anti-typo), values are type- and range-checked,
and every error names the offending key.  ``#`` starts a comment; blank
lines are ignored.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .regularizers import (
    NaiveCellDropout,
    OutputGateReuse,
    RecurrentDropout,
    RegularizerConfig,
    StochasticDepth,
    Zoneout,
)

TASKS = ("charlm", "wordlm", "pmnist")
CELLS = ("lstm", "gru", "rnn")
OPTIMIZERS = ("adam", "rmsprop", "sgd")
STATE_RULES = (
    "none",
    "zoneout",
    "recurrent_dropout",
    "naive_cell_dropout",
    "output_gate_reuse",
    "stochastic_depth",
)
STACKABLE = ("weight_noise", "norm_stabilizer")


@dataclass
class RunConfig:
    task: str = "charlm"
    cell: str = "lstm"
    hidden_size: int = 64
    layers: int = 1
    seq_len: int = 100
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0

    optimizer: str = "adam"
    lr: float = 0.002
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rmsprop_decay: float = 0.5
    rmsprop_eps: float = 1e-8
    lr_decay: float = 1.0
    lr_decay_start: int = 0

    clip: float = 1.0  # 0 disables clipping
    clip_kind: str = "norm"

    regularizer: str = "none"
    zc: float = 0.5
    zh: float = 0.05
    p: float = 0.25
    z: float = 0.05
    sigma: float = 0.075
    beta: float = 50.0
    mask_mode: str = "per_step"
    shared_mask: bool = False

    data_path: str = ""
    train_frac: float = 0.9
    valid_frac: float = 0.05
    overlap: str = "non_overlapping"
    stride: int = 0  # 0 -> seq_len // 2
    permute: bool = True
    permutation_seed: int = 0
    downsample: int = 2
    pmnist_steps: int = 0  # 0 -> full permuted sequence; N truncates (desk scale)

    init: str = "uniform"
    init_scale: float = 0.04
    forget_bias: float = 1.0

    output_dir: str = "run_out"
    eval_only: bool = False
    checkpoint: str = ""
    timing: bool = True
    max_batches_per_epoch: int = 0

    gf_regularizers: str = "zoneout,dropout,none"
    gf_target: str = "cell"
    gf_seeds: str = "1,2,3"
    gf_zc: float = 0.5

    def regularizer_config(self) -> RegularizerConfig:
        parts = []
        names = [s.strip() for s in self.regularizer.split("+") if s.strip()]
        if not names:
            names = ["none"]
        state_seen = []
        for name in names:
            if name == "none":
                continue
            if name == "zoneout":
                state_seen.append(Zoneout(self.zc, self.zh, self.shared_mask))
            elif name == "recurrent_dropout":
                state_seen.append(RecurrentDropout(self.p))
            elif name == "naive_cell_dropout":
                state_seen.append(NaiveCellDropout(self.p))
            elif name == "output_gate_reuse":
                state_seen.append(OutputGateReuse(self.p))
            elif name == "stochastic_depth":
                state_seen.append(StochasticDepth(self.z))
            elif name == "weight_noise":
                parts.append(("weight_noise", self.sigma))
            elif name == "norm_stabilizer":
                parts.append(("norm_stabilizer", self.beta))
            else:
                raise ConfigError(
                    f"regularizer: unknown component {name!r} "
                    f"(expected one of {STATE_RULES + STACKABLE})"
                )
        parts = state_seen + parts
        return RegularizerConfig.from_parts(parts, self.mask_mode)

    def text_level(self) -> str:
        return "word" if self.task == "wordlm" else "char"

    def effective_stride(self) -> int:
        return self.stride if self.stride > 0 else max(1, self.seq_len // 2)

    def snapshot(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


def _parse_value(key: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


_RANGES: dict[str, tuple] = {
    "task": TASKS,
    "cell": CELLS,
    "optimizer": OPTIMIZERS,
    "clip_kind": ("norm", "value"),
    "overlap": ("non_overlapping", "overlapping"),
    "mask_mode": ("per_step", "per_sequence", "static_global"),
    "init": ("uniform", "orthogonal"),
    "gf_target": ("cell", "hidden"),
}


def _validate(cfg: RunConfig) -> None:
    for key, allowed in _RANGES.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(f"config key {key!r}: {getattr(cfg, key)!r} not in {allowed}")
    positive = ("hidden_size", "layers", "seq_len", "batch_size", "lr", "init_scale", "downsample")
    for key in positive:
        if getattr(cfg, key) <= 0:
            raise ConfigError(f"config key {key!r} must be > 0")
    non_negative = ("epochs", "sigma", "beta", "stride", "max_batches_per_epoch",
                    "lr_decay_start", "pmnist_steps")
    for key in non_negative:
        if getattr(cfg, key) < 0:
            raise ConfigError(f"config key {key!r} must be >= 0")
    for key in ("zc", "zh", "p", "z"):
        v = getattr(cfg, key)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"config key {key!r}: {v} outside [0, 1]")
    for key in ("train_frac", "valid_frac"):
        v = getattr(cfg, key)
        if not 0.0 <= v < 1.0 or (key == "train_frac" and v == 0.0):
            raise ConfigError(f"config key {key!r}: {v} outside range")
    if cfg.train_frac + cfg.valid_frac > 1.0:
        raise ConfigError("train_frac + valid_frac exceeds 1")
    if cfg.clip < 0:
        raise ConfigError("config key 'clip' must be >= 0 (0 disables clipping)")
    if cfg.lr_decay < 1.0:
        raise ConfigError("config key 'lr_decay' must be >= 1 (divide-style decay)")
    cfg.regularizer_config()  # probability/combination validation


def parse_config(
    path: str | None = None,
    overrides: list[str] = (),
    require_data: bool = False,
) -> RunConfig:
    """Build a validated RunConfig from an optional file plus overrides.

    Overrides are ``key=value`` strings (CLI flags) applied after the file.
    """
    cfg = RunConfig()
    typed = {f.name: f.type for f in fields(cfg)}
    types = {name: type(getattr(cfg, name)) for name in typed}

    def apply(key: str, raw: str, where: str) -> None:
        key = key.strip()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r} ({where})")
        setattr(cfg, key, _parse_value(key, raw, types[key]))

    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, raw = line.split("=", 1)
                apply(key, raw, f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply(key, raw, "--set")

    _validate(cfg)
    if require_data:
        if not cfg.data_path:
            raise ConfigError("config key 'data_path' is required for this command")
        if not os.path.exists(cfg.data_path):
            raise ConfigError(f"data_path does not exist: {cfg.data_path}")
    return cfg
