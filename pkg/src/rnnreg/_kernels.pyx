# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-timestep kernels.

Mirrors the surface of rnnreg._kernels_np exactly; see that module for the
semantics.  All arrays are C-contiguous float64; backward kernels accumulate
(+=) into the provided buffers, and a None buffer means "no gradient needed".
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, tanh as ctanh


cdef inline double _sig(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def lstm_cell_fwd(double[:, ::1] pre, double[:, ::1] c_prev):
    cdef Py_ssize_t n_rows = pre.shape[0]
    cdef Py_ssize_t hidden = pre.shape[1] // 4
    i_arr = np.empty((n_rows, hidden))
    f_arr = np.empty((n_rows, hidden))
    o_arr = np.empty((n_rows, hidden))
    g_arr = np.empty((n_rows, hidden))
    cc_arr = np.empty((n_rows, hidden))
    cdef double[:, ::1] iv = i_arr
    cdef double[:, ::1] fv = f_arr
    cdef double[:, ::1] ov = o_arr
    cdef double[:, ::1] gv = g_arr
    cdef double[:, ::1] cc = cc_arr
    cdef Py_ssize_t b, k
    cdef double ii, ff, gg
    with nogil:
        for b in range(n_rows):
            for k in range(hidden):
                ii = _sig(pre[b, k])
                ff = _sig(pre[b, hidden + k])
                gg = ctanh(pre[b, 3 * hidden + k])
                iv[b, k] = ii
                fv[b, k] = ff
                ov[b, k] = _sig(pre[b, 2 * hidden + k])
                gv[b, k] = gg
                cc[b, k] = ff * c_prev[b, k] + ii * gg
    return i_arr, f_arr, o_arr, g_arr, cc_arr


def lstm_cell_bwd(
    double[:, ::1] i,
    double[:, ::1] f,
    double[:, ::1] o,
    double[:, ::1] g,
    double[:, ::1] c_prev,
    double[:, ::1] gi,
    double[:, ::1] gf,
    double[:, ::1] go,
    double[:, ::1] gg,
    double[:, ::1] gc,
    double[:, ::1] gpre_acc,
    double[:, ::1] gcprev_acc,
):
    cdef Py_ssize_t n_rows = i.shape[0]
    cdef Py_ssize_t hidden = i.shape[1]
    cdef bint has_gi = gi is not None
    cdef bint has_gf = gf is not None
    cdef bint has_go = go is not None
    cdef bint has_gg = gg is not None
    cdef bint has_gc = gc is not None
    cdef bint has_gcp = gcprev_acc is not None
    cdef Py_ssize_t b, k
    cdef double gct, git, gft, ggt, iv, fv, ov, gv
    with nogil:
        for b in range(n_rows):
            for k in range(hidden):
                iv = i[b, k]
                fv = f[b, k]
                gv = g[b, k]
                gct = gc[b, k] if has_gc else 0.0
                git = gct * gv
                gft = gct * c_prev[b, k]
                ggt = gct * iv
                if has_gi:
                    git = git + gi[b, k]
                if has_gf:
                    gft = gft + gf[b, k]
                if has_gg:
                    ggt = ggt + gg[b, k]
                gpre_acc[b, k] += git * iv * (1.0 - iv)
                gpre_acc[b, hidden + k] += gft * fv * (1.0 - fv)
                if has_go:
                    ov = o[b, k]
                    gpre_acc[b, 2 * hidden + k] += go[b, k] * ov * (1.0 - ov)
                gpre_acc[b, 3 * hidden + k] += ggt * (1.0 - gv * gv)
                if has_gcp:
                    gcprev_acc[b, k] += gct * fv


def tanh_mul_fwd(double[:, ::1] a, double[:, ::1] c):
    cdef Py_ssize_t n_rows = a.shape[0]
    cdef Py_ssize_t cols = a.shape[1]
    out_arr = np.empty((n_rows, cols))
    tc_arr = np.empty((n_rows, cols))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] tc = tc_arr
    cdef Py_ssize_t b, k
    cdef double t
    with nogil:
        for b in range(n_rows):
            for k in range(cols):
                t = ctanh(c[b, k])
                tc[b, k] = t
                out[b, k] = a[b, k] * t
    return out_arr, tc_arr


def tanh_mul_bwd(
    double[:, ::1] a,
    double[:, ::1] tanh_c,
    double[:, ::1] g,
    double[:, ::1] ga_acc,
    double[:, ::1] gc_acc,
):
    cdef Py_ssize_t n_rows = a.shape[0]
    cdef Py_ssize_t cols = a.shape[1]
    cdef bint has_ga = ga_acc is not None
    cdef bint has_gc = gc_acc is not None
    cdef Py_ssize_t b, k
    cdef double t
    with nogil:
        for b in range(n_rows):
            for k in range(cols):
                t = tanh_c[b, k]
                if has_ga:
                    ga_acc[b, k] += g[b, k] * t
                if has_gc:
                    gc_acc[b, k] += g[b, k] * a[b, k] * (1.0 - t * t)


def mask_mix_fwd(double[:, ::1] d, double[:, ::1] prev, double[:, ::1] cand):
    cdef Py_ssize_t n_rows = d.shape[0]
    cdef Py_ssize_t cols = d.shape[1]
    out_arr = np.empty((n_rows, cols))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, k
    with nogil:
        for b in range(n_rows):
            for k in range(cols):
                out[b, k] = d[b, k] * prev[b, k] + (1.0 - d[b, k]) * cand[b, k]
    return out_arr


def mask_mix_bwd(
    double[:, ::1] d,
    double[:, ::1] g,
    double[:, ::1] gprev_acc,
    double[:, ::1] gcand_acc,
):
    cdef Py_ssize_t n_rows = d.shape[0]
    cdef Py_ssize_t cols = d.shape[1]
    cdef bint has_gp = gprev_acc is not None
    cdef bint has_gc = gcand_acc is not None
    cdef Py_ssize_t b, k
    with nogil:
        for b in range(n_rows):
            for k in range(cols):
                if has_gp:
                    gprev_acc[b, k] += g[b, k] * d[b, k]
                if has_gc:
                    gcand_acc[b, k] += g[b, k] * (1.0 - d[b, k])


def lerp_fwd(double z, double[:, ::1] prev, double[:, ::1] cand):
    cdef Py_ssize_t n_rows = prev.shape[0]
    cdef Py_ssize_t cols = prev.shape[1]
    out_arr = np.empty((n_rows, cols))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, k
    with nogil:
        for b in range(n_rows):
            for k in range(cols):
                out[b, k] = z * prev[b, k] + (1.0 - z) * cand[b, k]
    return out_arr


def lerp_bwd(
    double z,
    double[:, ::1] g,
    double[:, ::1] gprev_acc,
    double[:, ::1] gcand_acc,
):
    cdef Py_ssize_t n_rows = g.shape[0]
    cdef Py_ssize_t cols = g.shape[1]
    cdef bint has_gp = gprev_acc is not None
    cdef bint has_gc = gcand_acc is not None
    cdef Py_ssize_t b, k
    with nogil:
        for b in range(n_rows):
            for k in range(cols):
                if has_gp:
                    gprev_acc[b, k] += z * g[b, k]
                if has_gc:
                    gcand_acc[b, k] += (1.0 - z) * g[b, k]


def softmax_xent_fwd(double[:, ::1] logits, cnp.int64_t[::1] targets):
    cdef Py_ssize_t n_rows = logits.shape[0]
    cdef Py_ssize_t n_cls = logits.shape[1]
    probs_arr = np.empty((n_rows, n_cls))
    cdef double[:, ::1] probs = probs_arr
    cdef Py_ssize_t b, k
    cdef double m, denom, acc
    acc = 0.0
    with nogil:
        for b in range(n_rows):
            m = logits[b, 0]
            for k in range(1, n_cls):
                if logits[b, k] > m:
                    m = logits[b, k]
            denom = 0.0
            for k in range(n_cls):
                probs[b, k] = exp(logits[b, k] - m)
                denom += probs[b, k]
            for k in range(n_cls):
                probs[b, k] /= denom
            acc += (logits[b, targets[b]] - m) - log(denom)
    return -acc / n_rows, probs_arr


def softmax_xent_bwd(
    double[:, ::1] probs,
    cnp.int64_t[::1] targets,
    double gscale,
    double[:, ::1] glogits_acc,
):
    cdef Py_ssize_t n_rows = probs.shape[0]
    cdef Py_ssize_t n_cls = probs.shape[1]
    cdef double w = gscale / n_rows
    cdef Py_ssize_t b, k
    with nogil:
        for b in range(n_rows):
            for k in range(n_cls):
                glogits_acc[b, k] += probs[b, k] * w
            glogits_acc[b, targets[b]] -= w
