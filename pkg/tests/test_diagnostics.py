import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from rnnreg import cells as C
from rnnreg import diagnostics as DG
from rnnreg import model as M
from rnnreg import regularizers as R
from rnnreg import tensor as T
from rnnreg.cells import CellState
from rnnreg.errors import NumericsError, ShapeError
from rnnreg.regularizers import TRAIN, MaskSource, RegularizerConfig, Zoneout
from rnnreg.tensor import parameter


def tiny_model(rng, vocab=4, hidden=3, forget_bias=1.0):
    return M.build_model("lstm", 1, vocab, hidden, vocab, rng, scale=0.4, forget_bias=forget_bias)


# ---------------------------------------------------------------------------
# finite-difference checker


def test_checker_on_square():
    x = parameter(np.array([3.0]))
    report = DG.finite_diff_check(lambda: T.mul(x, x), [("x", x)])
    assert report.passed
    assert report.max_rel_error < 1e-9
    assert report.worst_param == "x"


def test_checker_on_tanh_at_zero():
    x = parameter(np.array([0.0]))
    report = DG.finite_diff_check(lambda: T.tanh(x), [("x", x)])
    assert report.passed and report.max_rel_error < 1e-9


def test_checker_full_zoneout_lstm_three_steps(rng):
    """Frozen-mask zoneout LSTM over 3 steps: analytic vs central differences."""
    model = tiny_model(rng)
    inputs = rng.integers(0, 4, size=(2, 3))
    targets = rng.integers(0, 4, size=(2, 3))
    reg = RegularizerConfig(Zoneout(0.5, 0.05))
    frozen = MaskSource(13)
    plans = M.plan_masks(reg, frozen, 2, 3, 3, 0, TRAIN)

    def loss_fn():
        xs = M.encode_inputs(model, inputs)
        state = model.initial_states(2)[0]
        hs = []
        for t, x in enumerate(xs):
            step = C.lstm_step(model.cells[0], x, state)
            state = R.zoneout_lstm_assemble(
                step, step.c_cand, step.h_cand, state,
                plans[t].d_c, plans[t].d_h, TRAIN, 0.5, 0.05,
            )
            hs.append(state.h)
        logits = T.add_bias(T.matmul(T.concat_rows(hs), model.w_out), model.b_out)
        return T.softmax_cross_entropy(logits, targets.T.reshape(-1))

    report = DG.finite_diff_check(loss_fn, model.parameters())
    assert report.passed, str(report)
    assert report.max_rel_error < 1e-4


def test_checker_fails_on_corrupted_backward(rng, monkeypatch):
    """Fault injection: a wrong backward rule must be caught and named."""
    from rnnreg.backend import kernels

    orig = kernels.tanh_mul_bwd

    def corrupted(a, tanh_c, g, ga_acc, gc_acc):
        orig(a, tanh_c, g, ga_acc, gc_acc)
        if ga_acc is not None:
            ga_acc *= 1.5

    monkeypatch.setattr(kernels, "tanh_mul_bwd", corrupted)
    o = parameter(rng.uniform(0.2, 0.8, (2, 3)))
    c = parameter(rng.standard_normal((2, 3)))
    report = DG.finite_diff_check(lambda: T.mean_all(T.tanh_mul(o, c)), [("o", o), ("c", c)])
    assert not report.passed
    assert report.worst_param == "o"


def test_checker_rejects_nonfinite(rng):
    x = parameter(np.array([np.inf]))
    with pytest.raises(NumericsError):
        DG.finite_diff_check(lambda: T.mul(x, x), [("x", x)])


# ---------------------------------------------------------------------------
# gradient-flow profiles


def classification_batch(rng, batch=4, steps=5):
    inputs = rng.integers(0, 4, size=(batch, steps))
    labels = rng.integers(0, 4, size=batch)
    return inputs, labels


def test_profile_normalizes_to_one(rng):
    model = tiny_model(rng)
    inputs, labels = classification_batch(rng)
    prof = DG.gradient_flow(model, inputs, labels, RegularizerConfig(Zoneout(0.5, 0.05)), MaskSource(3))
    assert prof.values.shape == (5,)
    assert np.all(prof.values >= 0)
    assert abs(prof.values.sum() - 1.0) < 1e-10
    assert prof.target == "cell" and prof.label == "zoneout"


def test_profile_all_mass_on_last_step_when_recurrence_is_cut(rng):
    # f ~ 0 and W_h = 0 break both carry paths, so only c_T sees gradient
    model = tiny_model(rng, forget_bias=-100.0)
    model.cells[0].w_h.data[...] = 0.0
    inputs, labels = classification_batch(rng)
    prof = DG.gradient_flow(model, inputs, labels, RegularizerConfig(None), MaskSource(1))
    assert np.allclose(prof.values, [0, 0, 0, 0, 1], atol=1e-12)


def test_profile_frozen_masks_bitwise_repeatable(rng):
    model = tiny_model(rng)
    inputs, labels = classification_batch(rng)
    reg = RegularizerConfig(Zoneout(0.5, 0.05))
    a = DG.gradient_flow(model, inputs, labels, reg, MaskSource(11))
    b = DG.gradient_flow(model, inputs, labels, reg, MaskSource(11))
    assert a.values.tobytes() == b.values.tobytes()


def test_profile_degenerate_when_loss_blind_to_states(rng):
    model = tiny_model(rng)
    model.w_out.data[...] = 0.0  # logits constant -> uniform, but grads to h... nonzero
    # full zoneout keeps every state at the (zero) initial value instead
    inputs, labels = classification_batch(rng)
    with pytest.raises(NumericsError):
        DG.gradient_flow(model, inputs, labels, RegularizerConfig(Zoneout(1.0, 1.0)), MaskSource(1))


def test_profile_hidden_target_and_lstm_requirement(rng):
    model = tiny_model(rng)
    inputs, labels = classification_batch(rng)
    prof = DG.gradient_flow(model, inputs, labels, RegularizerConfig(None), MaskSource(1), target="hidden")
    assert abs(prof.values.sum() - 1.0) < 1e-10
    gru = M.build_model("gru", 1, 4, 3, 4, rng)
    with pytest.raises(ShapeError):
        DG.gradient_flow(gru, inputs, labels, RegularizerConfig(None), MaskSource(1), target="cell")
    with pytest.raises(ShapeError):
        DG.gradient_flow(model, inputs, labels, RegularizerConfig(None), MaskSource(1), target="loss")


def test_profile_matches_leaf_injection_oracle(rng):
    """Independent oracle: re-run with each c_t replaced by a fresh leaf and
    read that leaf's gradient (also cross-checked by finite differences)."""
    model = tiny_model(rng, vocab=3, hidden=2)
    batch, steps = 2, 2
    inputs = rng.integers(0, 3, size=(batch, steps))
    labels = rng.integers(0, 3, size=batch)
    reg = RegularizerConfig(Zoneout(0.5, 0.05))
    prof = DG.gradient_flow(model, inputs, labels, reg, MaskSource(21))
    plans = M.plan_masks(reg, MaskSource(21), batch, 2, steps, 0, TRAIN)

    def forward(inject_at=None, leaf=None):
        xs = M.encode_inputs(model, inputs)
        state = model.initial_states(batch)[0]
        for t, x in enumerate(xs):
            step = C.lstm_step(model.cells[0], x, state)
            state = R.zoneout_lstm_assemble(
                step, step.c_cand, step.h_cand, state,
                plans[t].d_c, plans[t].d_h, TRAIN, 0.5, 0.05,
            )
            if inject_at == t:
                state = CellState(state.h, leaf)
        logits = T.add_bias(T.matmul(state.h, model.w_out), model.b_out)
        return T.softmax_cross_entropy(logits, labels)

    raw = np.empty(steps)
    for t in range(steps):
        base = forward()  # plain run to capture the realized c_t values
        xs = M.encode_inputs(model, inputs)
        state = model.initial_states(batch)[0]
        for k in range(t + 1):
            step = C.lstm_step(model.cells[0], xs[k], state)
            state = R.zoneout_lstm_assemble(
                step, step.c_cand, step.h_cand, state,
                plans[k].d_c, plans[k].d_h, TRAIN, 0.5, 0.05,
            )
        leaf = parameter(state.c.data.copy())
        with T.Graph():
            T.backward(forward(inject_at=t, leaf=leaf))
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        raw[t] = np.linalg.norm(grad, axis=1).mean()
        numeric = numeric_grad(lambda: forward(inject_at=t, leaf=leaf).item(), leaf.data)
        assert rel_err(grad, numeric) < 1e-4
    assert np.allclose(prof.values, raw / raw.sum(), atol=1e-10)


def test_averaging_profiles_over_seeds_reduces_variance(rng):
    model = tiny_model(rng)
    inputs, labels = classification_batch(rng, batch=3, steps=6)
    reg = RegularizerConfig(Zoneout(0.5, 0.05))
    profiles = np.stack(
        [DG.gradient_flow(model, inputs, labels, reg, MaskSource(s)).values for s in range(18)]
    )
    singles_var = profiles.var(axis=0).mean()
    means = profiles.reshape(6, 3, -1).mean(axis=1)
    assert means.var(axis=0).mean() < singles_var
