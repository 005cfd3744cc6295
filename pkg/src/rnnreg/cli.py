"""Command-line entry point: train / eval / gradflow / gradcheck.

Every run is a batch job driven by one seed: initialization, mask streams,
weight noise, and data order each draw from their own named substream, so a
(config, seed) pair reproduces bitwise-identical outputs.

Exit codes: 0 success, 1 config error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as CK
from . import data as D
from . import diagnostics as DG
from . import training as TR
from .backend import BACKEND_NAME
from .config import RunConfig, parse_config
from .errors import ConfigError, DataError, NumericsError
from .model import SequenceModel, build_model, plan_masks, validate_rule_for_cell
from .regularizers import (
    TRAIN,
    MaskSource,
    NaiveCellDropout,
    OutputGateReuse,
    RecurrentDropout,
    RegularizerConfig,
    StochasticDepth,
    Zoneout,
    stream_rng,
)

PROFILE_HEADER = "timestep,normalized_norm"


# ---------------------------------------------------------------------------
# task data plumbing


@dataclass
class TaskData:
    input_size: int
    output_size: int
    input_kind: str
    stateful: bool
    train_batches: Callable[[], object]  # fresh iterable per epoch
    valid_batches: Callable[[], object]
    test_batches: Callable[[], object]
    meta: dict


def _eval_batch_size(codes_len: int, seq_len: int, requested: int) -> int:
    usable = max(1, codes_len // (seq_len + 1))
    return max(1, min(requested, usable))


def load_task_data(cfg: RunConfig) -> TaskData:
    if cfg.task in ("charlm", "wordlm"):
        vocab, codes = D.load_text(cfg.data_path, cfg.text_level())
        tr, va, te = D.split_codes(codes, cfg.train_frac, cfg.valid_frac)

        def lm_batcher(split, overlap, requested):
            return D.SequenceBatcher(
                split,
                seq_len=cfg.seq_len,
                batch_size=_eval_batch_size(len(split), cfg.seq_len, requested),
                overlap=overlap,
                stride=cfg.effective_stride(),
            )

        train = lambda: lm_batcher(tr, cfg.overlap, cfg.batch_size)
        valid = lambda: lm_batcher(va, "non_overlapping", cfg.batch_size)
        test = lambda: lm_batcher(te, "non_overlapping", cfg.batch_size)
        return TaskData(
            input_size=len(vocab),
            output_size=len(vocab),
            input_kind="onehot",
            stateful=cfg.overlap == "non_overlapping",
            train_batches=train,
            valid_batches=valid,
            test_batches=test,
            meta={"task": cfg.task, "vocab_size": len(vocab)},
        )

    # pmnist
    ds = D.load_pmnist(cfg.data_path, cfg.permutation_seed, cfg.downsample, cfg.permute)
    if cfg.pmnist_steps:
        ds = D.PermutedImageSet(
            np.ascontiguousarray(ds.images[:, : cfg.pmnist_steps]),
            ds.labels,
            ds.permutation[: cfg.pmnist_steps],
            ds.source_hw,
        )
    tr, va, te = D.split_images(ds, cfg.train_frac, cfg.valid_frac)
    data_rng = stream_rng(cfg.seed, "data")
    return TaskData(
        input_size=1,
        output_size=10,
        input_kind="scalar",
        stateful=False,
        train_batches=lambda: D.image_batches(tr, cfg.batch_size, rng=data_rng),
        valid_batches=lambda: D.image_batches(va, cfg.batch_size, drop_last=False),
        test_batches=lambda: D.image_batches(te, cfg.batch_size, drop_last=False),
        meta={"task": cfg.task, "steps": tr.images.shape[1]},
    )


def build_run_model(cfg: RunConfig, task: TaskData) -> SequenceModel:
    return build_model(
        cfg.cell,
        cfg.layers,
        task.input_size,
        cfg.hidden_size,
        task.output_size,
        stream_rng(cfg.seed, "init"),
        input_kind=task.input_kind,
        scheme=cfg.init,
        scale=cfg.init_scale,
        forget_bias=cfg.forget_bias,
    )


def _clip_rule(cfg: RunConfig) -> TR.ClipRule | None:
    return TR.ClipRule(cfg.clip, cfg.clip_kind) if cfg.clip > 0 else None


def _optimizer(cfg: RunConfig):
    if cfg.optimizer == "adam":
        return TR.Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if cfg.optimizer == "rmsprop":
        return TR.RMSProp(cfg.lr, cfg.rmsprop_decay, cfg.rmsprop_eps)
    return TR.SGD(cfg.lr)


# ---------------------------------------------------------------------------
# train / eval


def run_train(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.snapshot(), encoding="utf-8")
    task = load_task_data(cfg)
    reg = cfg.regularizer_config()
    validate_rule_for_cell(reg.state_rule, cfg.cell)

    if cfg.eval_only:
        return run_eval(cfg)

    model = build_run_model(cfg, task)
    optimizer = _optimizer(cfg)
    schedule = TR.LRSchedule(cfg.lr, cfg.lr_decay, cfg.lr_decay_start)
    clip = _clip_rule(cfg)
    masks = MaskSource(cfg.seed)
    noise_rng = stream_rng(cfg.seed, "weight_noise")
    classification = task.input_kind == "scalar"

    print(f"[rnnreg] backend={BACKEND_NAME} task={cfg.task} cell={cfg.cell} "
          f"H={cfg.hidden_size} layers={cfg.layers} reg={reg.label} seed={cfg.seed}")
    with open(out / "metrics.csv", "w", buffering=1, encoding="utf-8") as metrics:
        metrics.write(TR.RunRecord.CSV_HEADER + "\n")
        try:
            for epoch in range(1, cfg.epochs + 1):
                lr = schedule.rate(epoch)
                t0 = time.perf_counter()
                stats = TR.train_epoch(
                    model,
                    task.train_batches(),
                    reg,
                    masks,
                    optimizer,
                    clip,
                    lr=lr,
                    noise_rng=noise_rng,
                    stateful=task.stateful,
                    max_batches=cfg.max_batches_per_epoch,
                )
                wall = time.perf_counter() - t0 if cfg.timing else 0.0
                row = TR.RunRecord.from_nll(
                    epoch, "train", stats.nll, stats.error_rate, stats.grad_norm, wall
                )
                metrics.write(row.csv_row() + "\n")
                t0 = time.perf_counter()
                vstats = TR.eval_epoch(model, task.valid_batches(), reg, stateful=task.stateful)
                vwall = time.perf_counter() - t0 if cfg.timing else 0.0
                vrow = TR.RunRecord.from_nll(
                    epoch, "valid", vstats.nll, vstats.error_rate, float("nan"), vwall
                )
                metrics.write(vrow.csv_row() + "\n")
                if classification:
                    print(f"  epoch {epoch:3d} lr={lr:.6g} train_nll={stats.nll:.4f} "
                          f"train_err={stats.error_rate:.4f} valid_err={vstats.error_rate:.4f}")
                else:
                    print(f"  epoch {epoch:3d} lr={lr:.6g} train_bpc={row.bpc:.4f} "
                          f"valid_bpc={vrow.bpc:.4f} grad_norm={stats.grad_norm:.3f}")
            if cfg.epochs > 0:
                t0 = time.perf_counter()
                tstats = TR.eval_epoch(model, task.test_batches(), reg, stateful=task.stateful)
                twall = time.perf_counter() - t0 if cfg.timing else 0.0
                trow = TR.RunRecord.from_nll(
                    cfg.epochs, "test", tstats.nll, tstats.error_rate, float("nan"), twall
                )
                metrics.write(trow.csv_row() + "\n")
        except NumericsError as exc:
            (out / "abort.json").write_text(
                json.dumps({"error": str(exc), "backend": BACKEND_NAME}), encoding="utf-8"
            )
            raise
    CK.save_model(str(out / "model.ckpt"), model, extra_meta=task.meta)
    print(f"[rnnreg] wrote {out / 'metrics.csv'} and {out / 'model.ckpt'}")
    return 0


def run_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("eval needs config key 'checkpoint' (path to model.ckpt)")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = load_task_data(cfg)
    model, _meta = CK.load_model(cfg.checkpoint)
    reg = cfg.regularizer_config()
    with open(out / "metrics.csv", "w", buffering=1, encoding="utf-8") as metrics:
        metrics.write(TR.RunRecord.CSV_HEADER + "\n")
        for split, batches in (("valid", task.valid_batches()), ("test", task.test_batches())):
            t0 = time.perf_counter()
            stats = TR.eval_epoch(model, batches, reg, stateful=task.stateful)
            wall = time.perf_counter() - t0 if cfg.timing else 0.0
            row = TR.RunRecord.from_nll(0, split, stats.nll, stats.error_rate, float("nan"), wall)
            metrics.write(row.csv_row() + "\n")
            print(f"  {split}: nll={stats.nll:.5f} bpc={row.bpc:.5f} err={stats.error_rate}")
    return 0


# ---------------------------------------------------------------------------
# gradient flow


def _gradflow_rule(name: str, cfg: RunConfig):
    """Comparator configs for the flow probe (cells-masked at gf_zc)."""
    name = name.strip()
    table = {
        "none": None,
        "zoneout": Zoneout(cfg.gf_zc, 0.0),  # cells only
        "dropout": NaiveCellDropout(cfg.gf_zc),  # zero-mapping twin, cells only
        "recurrent_dropout": RecurrentDropout(cfg.p),
        "naive_cell_dropout": NaiveCellDropout(cfg.p),
        "output_gate_reuse": OutputGateReuse(cfg.p),
        "stochastic_depth": StochasticDepth(cfg.z),
    }
    if name not in table:
        raise ConfigError(f"gf_regularizers: unknown comparator {name!r}")
    return RegularizerConfig(table[name], mask_mode=cfg.mask_mode)


def _write_profile(path: Path, values: np.ndarray, comment: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {comment}\n")
        fh.write(PROFILE_HEADER + "\n")
        for t, v in enumerate(values):
            fh.write(f"{t},{float(v)!r}\n")


def run_gradflow(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in cfg.gf_seeds.split(",") if s.strip()]
    names = [n.strip() for n in cfg.gf_regularizers.split(",") if n.strip()]
    if not seeds or not names:
        raise ConfigError("gradflow needs non-empty gf_seeds and gf_regularizers")
    summary: dict[str, list[float]] = {}
    for name in names:
        profiles = []
        for seed in seeds:
            sub = RunConfig(**{**cfg.__dict__, "seed": seed})
            task = load_task_data(sub)
            reg = _gradflow_rule(name, sub)
            validate_rule_for_cell(reg.state_rule, sub.cell)
            model = build_run_model(sub, task)
            optimizer = _optimizer(sub)
            masks = MaskSource(seed)
            for _ in range(sub.epochs):
                TR.train_epoch(
                    model,
                    task.train_batches(),
                    reg,
                    masks,
                    optimizer,
                    _clip_rule(sub),
                    noise_rng=stream_rng(seed, "weight_noise"),
                    stateful=task.stateful,
                    max_batches=sub.max_batches_per_epoch,
                )
            probe_x, probe_y = next(iter(task.valid_batches()))
            prof = DG.gradient_flow(model, probe_x, probe_y, reg, MaskSource(seed), cfg.gf_target)
            profiles.append(prof.values)
            comment = (f"task={cfg.task} cell={cfg.cell} hidden={cfg.hidden_size} "
                       f"regularizer={name} target={cfg.gf_target} seed={seed} "
                       f"epochs={cfg.epochs} backend={BACKEND_NAME}")
            _write_profile(out / f"gradflow_{name}_seed{seed}.csv", prof.values, comment)
        stack = np.stack(profiles)
        if len(seeds) > 1:
            _write_profile(
                out / f"gradflow_{name}_mean.csv",
                stack.mean(axis=0),
                f"mean over seeds={cfg.gf_seeds} regularizer={name} target={cfg.gf_target}",
            )
        quarter = max(1, stack.shape[1] // 4)
        masses = stack[:, :quarter].sum(axis=1)
        summary[name] = masses.tolist()
        print(f"  {name}: early-quarter mass per seed = "
              f"{', '.join(f'{m:.4f}' for m in masses)} (median {np.median(masses):.4f})")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


GRADCHECK_RULES = (
    "none",
    "zoneout",
    "recurrent_dropout",
    "naive_cell_dropout",
    "output_gate_reuse",
    "stochastic_depth",
    "norm_stabilizer",
)

# combinations the defining equations do not cover (reported as SKIP)
GRADCHECK_SKIPS = {
    ("gru", "output_gate_reuse"): "needs LSTM output gates",
    ("rnn", "output_gate_reuse"): "needs LSTM output gates",
    ("rnn", "recurrent_dropout"): "tanh-RNN has no input/update gate",
}


@dataclass
class GradcheckCase:
    cell: str
    rule: str
    skipped: bool = False
    reason: str = ""
    report: DG.FiniteDiffReport | None = None

    @property
    def passed(self) -> bool:
        return self.skipped or (self.report is not None and self.report.passed)

    def line(self) -> str:
        if self.skipped:
            return f"SKIP cell={self.cell:4s} reg={self.rule:18s} ({self.reason})"
        status = "PASS" if self.report.passed else "FAIL"
        return (f"{status} cell={self.cell:4s} reg={self.rule:18s} "
                f"max_rel={self.report.max_rel_error:.3e} "
                f"worst={self.report.worst_param}[{self.report.worst_index}]")


def _gradcheck_reg(rule: str) -> RegularizerConfig:
    table = {
        "none": RegularizerConfig(None),
        "zoneout": RegularizerConfig(Zoneout(0.5, 0.05)),
        "recurrent_dropout": RegularizerConfig(RecurrentDropout(0.25)),
        "naive_cell_dropout": RegularizerConfig(NaiveCellDropout(0.25)),
        "output_gate_reuse": RegularizerConfig(OutputGateReuse(0.25)),
        "stochastic_depth": RegularizerConfig(StochasticDepth(0.3)),
        "norm_stabilizer": RegularizerConfig(None, norm_stabilizer_beta=50.0),
    }
    return table[rule]


def gradcheck_cases(
    cells=("lstm", "gru", "rnn"),
    rules=GRADCHECK_RULES,
    hidden: int = 5,
    steps: int = 3,
    batch: int = 2,
    vocab: int = 4,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    with_weight_noise: bool = True,
) -> list[GradcheckCase]:
    """Finite-difference checks of every cell x regularizer combination at
    toy sizes with frozen masks."""
    from .model import sequence_nll  # local import to keep module load light

    cases: list[GradcheckCase] = []
    specs = [(c, r) for c in cells for r in rules]
    if with_weight_noise:
        specs.append(("lstm", "weight_noise"))
    for idx, (cell, rule) in enumerate(specs):
        if (cell, rule) in GRADCHECK_SKIPS:
            cases.append(GradcheckCase(cell, rule, skipped=True, reason=GRADCHECK_SKIPS[(cell, rule)]))
            continue
        rng = np.random.default_rng(1000 + idx)
        model = build_model(cell, 1, vocab, hidden, vocab, rng, scale=0.6, forget_bias=0.3)
        inputs = rng.integers(0, vocab, size=(batch, steps))
        targets = rng.integers(0, vocab, size=(batch, steps))
        if rule == "weight_noise":
            reg = RegularizerConfig(None)
            noise = stream_rng(idx, "frozen_noise")
            perturb = [noise.normal(0.0, 0.075, size=t.data.shape) for t in model.param_tensors()]
            for t, eps in zip(model.param_tensors(), perturb):
                t.data += eps  # check the clean path at the frozen-noise point
        else:
            reg = _gradcheck_reg(rule)
        source = MaskSource(2000 + idx)
        frozen = [plan_masks(reg, source, batch, hidden, steps, 0, TRAIN)]

        def loss_fn(model=model, reg=reg, frozen=frozen, inputs=inputs, targets=targets):
            return sequence_nll(
                model, inputs, targets, reg, TRAIN, mask_plans=frozen
            ).loss

        report = DG.finite_diff_check(loss_fn, model.parameters(), step=step, tolerance=tolerance)
        cases.append(GradcheckCase(cell, rule, report=report))
    return cases


def run_gradcheck(cfg: RunConfig | None = None) -> int:
    tol = 1e-4
    t0 = time.perf_counter()
    cases = gradcheck_cases(tolerance=tol)
    failed = 0
    for case in cases:
        print(case.line())
        if not case.passed:
            failed += 1
    wall = time.perf_counter() - t0
    checked = sum(1 for c in cases if not c.skipped)
    print(f"[rnnreg] gradcheck: {checked} checked, "
          f"{sum(1 for c in cases if c.skipped)} skipped, {failed} failed "
          f"(tolerance {tol:g}, {wall:.1f}s)")
    return 0 if failed == 0 else 2


# ---------------------------------------------------------------------------
# argument parsing


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rnnreg",
        description="Train and probe recurrent networks with stochastic state regularizers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (("train", True), ("eval", True), ("gradflow", True), ("gradcheck", False)):
        p = sub.add_parser(name)
        if needs_config:
            p.add_argument("config", nargs="?", default=None, help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", dest="out", default=None, help="override output_dir")
    args = parser.parse_args(argv)

    try:
        overrides = list(args.overrides)
        if args.out is not None:
            overrides.append(f"output_dir={args.out}")
        if args.command == "gradcheck":
            cfg = parse_config(None, overrides)
            return run_gradcheck(cfg)
        cfg = parse_config(getattr(args, "config", None), overrides, require_data=True)
        if args.command == "train":
            return run_train(cfg)
        if args.command == "eval":
            return run_eval(cfg)
        return run_gradflow(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
