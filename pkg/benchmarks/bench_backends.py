"""Compare the compiled cell kernels against the pure-numpy fallback.

Times full training steps (forward + backward + clip + Adam) at the two
shapes the experiments actually run -- the character-LM shape and the
pixel-sequence shape -- under both backends.  Matrix products use numpy's
BLAS either way; the compiled path fuses the per-timestep gate/state math.

Usage: python benchmarks/bench_backends.py [--steps N]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

CASES = {
    "charlm_h256": dict(task="lm", vocab=65, hidden=256, seq=100, batch=32),
    "pmnist_h100": dict(task="cls", vocab=1, hidden=100, seq=196, batch=32),
}


def run_case(name: str, steps: int) -> dict:
    import numpy as np

    import rnnreg.training as TR
    from rnnreg.backend import BACKEND_NAME
    from rnnreg.model import build_model, sequence_nll
    from rnnreg.regularizers import TRAIN, MaskSource, RegularizerConfig, Zoneout
    from rnnreg.tensor import Graph, backward

    spec = CASES[name]
    rng = np.random.default_rng(0)
    if spec["task"] == "lm":
        model = build_model("lstm", 1, spec["vocab"], spec["hidden"], spec["vocab"], rng)
        inputs = rng.integers(0, spec["vocab"], size=(spec["batch"], spec["seq"]))
        targets = rng.integers(0, spec["vocab"], size=(spec["batch"], spec["seq"]))
    else:
        model = build_model("lstm", 1, 1, spec["hidden"], 10, rng, input_kind="scalar")
        inputs = rng.random((spec["batch"], spec["seq"]))
        targets = rng.integers(0, 10, size=spec["batch"])
    reg = RegularizerConfig(Zoneout(0.5, 0.05))
    masks = MaskSource(0)
    opt = TR.Adam(0.002)
    params = model.param_tensors()

    def one_step():
        model.zero_grad()
        with Graph():
            out = sequence_nll(model, inputs, targets, reg, TRAIN, masks)
            backward(out.loss)
        TR.clip_gradients([p.grad for p in params if p.grad is not None], TR.ClipRule(1.0))
        opt.step(params)

    one_step()  # warmup
    t0 = time.perf_counter()
    for _ in range(steps):
        one_step()
    dt = (time.perf_counter() - t0) / steps
    return {"case": name, "backend": BACKEND_NAME, "sec_per_step": dt}


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=10)
    parser.add_argument("--case", default=None, help="(internal) run one case in-process")
    args = parser.parse_args()

    if args.case:
        print(json.dumps(run_case(args.case, args.steps)))
        return 0

    results = []
    for backend in ("compiled", "numpy"):
        for case in CASES:
            env = dict(os.environ, RNNREG_BACKEND=backend)
            proc = subprocess.run(
                [sys.executable, __file__, "--case", case, "--steps", str(args.steps)],
                capture_output=True, text=True, env=env, check=True,
            )
            results.append(json.loads(proc.stdout.strip().splitlines()[-1]))

    print(f"{'case':14s} {'backend':9s} {'ms/step':>9s} {'steps/s':>8s}")
    by_case: dict[str, dict[str, float]] = {}
    for r in results:
        by_case.setdefault(r["case"], {})[r["backend"]] = r["sec_per_step"]
        print(f"{r['case']:14s} {r['backend']:9s} {r['sec_per_step']*1e3:9.1f} {1/r['sec_per_step']:8.2f}")
    for case, d in by_case.items():
        if "compiled" in d and "numpy" in d:
            print(f"{case}: compiled is {d['numpy']/d['compiled']:.2f}x the numpy fallback")
    return 0


if __name__ == "__main__":
    sys.exit(main())
