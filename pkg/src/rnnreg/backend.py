"""Kernel backend selection.

The per-timestep cell kernels exist twice: a Cython extension
(``rnnreg._kernels``) and a pure-numpy fallback (``rnnreg._kernels_np``).
The compiled module is preferred when importable; set ``RNNREG_BACKEND`` to
``numpy`` or ``compiled`` to force one side (``compiled`` raises if the
extension is missing).  Matrix products go through numpy's BLAS in both
backends.
"""

from __future__ import annotations

import os

_requested = os.environ.get("RNNREG_BACKEND", "auto").strip().lower()

if _requested in ("auto", "", "compiled"):
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        COMPILED = True
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "RNNREG_BACKEND=compiled but the rnnreg._kernels extension is "
                "not built; install with a C toolchain or unset the variable"
            )
        from . import _kernels_np as kernels

        COMPILED = False
elif _requested == "numpy":
    from . import _kernels_np as kernels

    COMPILED = False
else:
    raise ImportError(f"unknown RNNREG_BACKEND value: {_requested!r}")

BACKEND_NAME = "compiled" if COMPILED else "numpy"
