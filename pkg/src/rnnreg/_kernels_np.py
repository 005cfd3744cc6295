"""Pure-numpy implementations of the hot per-timestep kernels.

This module mirrors the surface of the compiled extension ``rnnreg._kernels``
exactly; ``rnnreg.backend`` picks one of the two at import time.  Everything
here works on C-contiguous float64 arrays.  Backward kernels *accumulate*
into the provided gradient buffers (``+=``) so a tensor feeding several ops
collects the sum of all paths; a ``None`` buffer means that operand does not
need a gradient.
"""

from __future__ import annotations

import numpy as np


def lstm_cell_fwd(pre, c_prev):
    """Gate activations and the cell candidate from stacked pre-activations.

    ``pre`` is B x 4H with column blocks [i, f, o, g]; i/f/o pass through the
    logistic sigmoid, g through tanh.  Returns (i, f, o, g, c_cand) with
    c_cand = f*c_prev + i*g.  The hidden read-out o*tanh(c_cand) is a
    separate op so the cell tensor's adjoint covers both of its uses.
    """
    hidden = pre.shape[1] // 4
    i = _sigmoid(pre[:, :hidden])
    f = _sigmoid(pre[:, hidden : 2 * hidden])
    o = _sigmoid(pre[:, 2 * hidden : 3 * hidden])
    g = np.tanh(pre[:, 3 * hidden :])
    c_cand = f * c_prev + i * g
    return i, f, o, g, c_cand


def lstm_cell_bwd(i, f, o, g, c_prev, gi, gf, go, gg, gc, gpre_acc, gcprev_acc):
    """Reverse rule for ``lstm_cell_fwd``.

    gi/gf/go/gg/gc are the adjoints of the forward outputs (None when an
    output was unused).  Accumulates into gpre_acc (B x 4H) and, when not
    None, gcprev_acc (B x H).
    """
    hidden = i.shape[1]
    gc_total = np.zeros_like(i) if gc is None else gc
    gi_total = gc_total * g
    gf_total = gc_total * c_prev
    gg_total = gc_total * i
    if gi is not None:
        gi_total += gi
    if gf is not None:
        gf_total += gf
    if gg is not None:
        gg_total += gg
    gpre_acc[:, :hidden] += gi_total * i * (1.0 - i)
    gpre_acc[:, hidden : 2 * hidden] += gf_total * f * (1.0 - f)
    if go is not None:
        gpre_acc[:, 2 * hidden : 3 * hidden] += go * o * (1.0 - o)
    gpre_acc[:, 3 * hidden :] += gg_total * (1.0 - g * g)
    if gcprev_acc is not None:
        gcprev_acc += gc_total * f


def tanh_mul_fwd(a, c):
    """out = a * tanh(c); returns (out, tanh_c) with tanh_c saved for backward."""
    tanh_c = np.tanh(c)
    return a * tanh_c, tanh_c


def tanh_mul_bwd(a, tanh_c, g, ga_acc, gc_acc):
    if ga_acc is not None:
        ga_acc += g * tanh_c
    if gc_acc is not None:
        gc_acc += g * a * (1.0 - tanh_c * tanh_c)


def mask_mix_fwd(d, prev, cand):
    """out = d*prev + (1-d)*cand for a constant 0/1 mask d."""
    return d * prev + (1.0 - d) * cand


def mask_mix_bwd(d, g, gprev_acc, gcand_acc):
    if gprev_acc is not None:
        gprev_acc += g * d
    if gcand_acc is not None:
        gcand_acc += g * (1.0 - d)


def lerp_fwd(z, prev, cand):
    """out = z*prev + (1-z)*cand for a scalar mixing weight z."""
    return z * prev + (1.0 - z) * cand


def lerp_bwd(z, g, gprev_acc, gcand_acc):
    if gprev_acc is not None:
        gprev_acc += z * g
    if gcand_acc is not None:
        gcand_acc += (1.0 - z) * g


def softmax_xent_fwd(logits, targets):
    """Mean negative log-softmax over rows, max-stabilized.

    Returns (loss, probs) where probs (the row softmax) is saved for backward.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    probs = exp / denom
    rows = np.arange(logits.shape[0])
    log_probs = shifted[rows, targets] - np.log(denom[:, 0])
    return -float(log_probs.mean()), probs


def softmax_xent_bwd(probs, targets, gscale, glogits_acc):
    rows = np.arange(probs.shape[0])
    delta = probs * (gscale / probs.shape[0])
    delta[rows, targets] -= gscale / probs.shape[0]
    glogits_acc += delta


def _sigmoid(x):
    # evaluated on both halves to avoid exp overflow warnings at +-700
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    """Numerically safe logistic sigmoid (shared helper, any shape)."""
    return _sigmoid(np.asarray(x, dtype=np.float64))
