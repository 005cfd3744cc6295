import numpy as np
import pytest

from conftest import analytic_grads, numeric_grad, rel_err
from rnnreg import cells as C
from rnnreg import model as M
from rnnreg import regularizers as R
from rnnreg import tensor as T
from rnnreg.cells import CellState, LSTMStep
from rnnreg.errors import ConfigError, ShapeError
from rnnreg.regularizers import (
    EVAL,
    TRAIN,
    MaskBatch,
    MaskSource,
    MaskSpec,
    NaiveCellDropout,
    OutputGateReuse,
    RecurrentDropout,
    RegularizerConfig,
    StochasticDepth,
    Zoneout,
)
from rnnreg.tensor import Tensor


def const_mask(values) -> MaskBatch:
    return MaskBatch(Tensor(np.asarray(values, dtype=float)))


def fabricated_step(i, f, o, g, c_prev):
    i, f, o, g, c_prev = (Tensor(np.asarray(v, dtype=float)) for v in (i, f, o, g, c_prev))
    c_cand = T.muladd(f, c_prev, i, g)
    h_cand = T.tanh_mul(o, c_cand)
    return LSTMStep(i, f, o, g, c_cand, h_cand), CellState(Tensor(np.zeros_like(i.data)), c_prev)


# ---------------------------------------------------------------------------
# mask sampling


def test_sample_mask_degenerate_probabilities(rng):
    zeros = R.sample_mask(MaskSpec(0.0), (4, 5), rng)
    ones = R.sample_mask(MaskSpec(1.0), (4, 5), rng)
    assert np.all(zeros.d.data == 0.0)
    assert np.all(ones.d.data == 1.0)


def test_sample_mask_mean_within_binomial_interval():
    # 99.99% binomial CI for p=0.5, n=1e6 is well inside [0.498, 0.502]
    rng = R.stream_rng(7, "test")
    mask = R.sample_mask(MaskSpec(0.5), (1000, 1000), rng)
    assert 0.498 <= mask.d.data.mean() <= 0.502


def test_mask_spec_validation():
    with pytest.raises(ConfigError):
        MaskSpec(1.5)
    with pytest.raises(ConfigError):
        MaskSpec(0.5, mode="sometimes")


def test_mask_entries_strictly_binary():
    with pytest.raises(ShapeError):
        MaskBatch(Tensor(np.array([[0.5]])))


def test_stream_rngs_are_independent_and_reproducible():
    a1 = R.stream_rng(3, "masks/c").random(8)
    a2 = R.stream_rng(3, "masks/c").random(8)
    b = R.stream_rng(3, "masks/h").random(8)
    c = R.stream_rng(4, "masks/c").random(8)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)


def test_shared_hc_masks_identical_each_step():
    reg = RegularizerConfig(Zoneout(0.3, 0.3, shared_mask=True))
    plans = M.plan_masks(reg, MaskSource(5), batch=2, hidden=6, steps=4, layer=0, mode=TRAIN)
    for sm in plans:
        assert sm.d_c is sm.d_h
        assert np.array_equal(sm.d_c.d.data, sm.d_h.d.data)


def test_static_global_masks_fixed_across_batches_and_epochs():
    source = MaskSource(11)
    spec = MaskSpec(0.5, "static_global", "masks/L0/zoneout_c")
    first = source.sequence_masks(spec, 3, 16, 5)
    second = source.sequence_masks(spec, 3, 16, 5)  # "next batch/epoch"
    for a, b in zip(first, second):
        assert np.array_equal(a.d.data, b.d.data)
        # shared across examples: every row identical
        assert np.all(a.d.data == a.d.data[0])
    stacked = np.stack([m.d.data[0] for m in first])
    assert len({row.tobytes() for row in stacked}) > 1  # differs across timesteps


def test_per_sequence_mask_constant_within_sequence():
    source = MaskSource(2)
    masks = source.sequence_masks(MaskSpec(0.5, "per_sequence", "s"), 2, 8, 6)
    for m in masks[1:]:
        assert m is masks[0]


def test_per_timestep_whole_state_broadcasts_rows():
    source = MaskSource(2)
    masks = source.sequence_masks(MaskSpec(0.5, "per_timestep_whole_state", "d"), 4, 6, 3)
    for m in masks:
        assert np.all(m.d.data == m.d.data[:, :1])  # constant across units


# ---------------------------------------------------------------------------
# regularizer config


def test_config_rejects_two_state_rules():
    with pytest.raises(ConfigError):
        RegularizerConfig.from_parts([Zoneout(0.5, 0.05), RecurrentDropout(0.25)])


def test_config_combines_state_rule_with_stackable_terms():
    reg = RegularizerConfig.from_parts(
        [Zoneout(0.5, 0.05), ("weight_noise", 0.075), ("norm_stabilizer", 50.0)]
    )
    assert isinstance(reg.state_rule, Zoneout)
    assert reg.weight_noise_sigma == 0.075
    assert reg.norm_stabilizer_beta == 50.0
    assert reg.label == "zoneout+weight_noise+norm_stabilizer"


def test_config_validation_ranges():
    with pytest.raises(ConfigError):
        RegularizerConfig(Zoneout(1.5, 0.0))
    with pytest.raises(ConfigError):
        RegularizerConfig(RecurrentDropout(-0.1))
    with pytest.raises(ConfigError):
        RegularizerConfig(weight_noise_sigma=-1.0)
    with pytest.raises(ConfigError):
        RegularizerConfig(Zoneout(0.3, 0.2, shared_mask=True))


# ---------------------------------------------------------------------------
# zoneout assembly


def test_zoneout_full_masks_preserve_state_bitwise(rng):
    step, prev = fabricated_step(
        [[0.3, 0.6]], [[0.5, 0.9]], [[0.2, 0.8]], [[0.1, -0.4]], [[1.25, -2.5]]
    )
    prev = CellState(Tensor(rng.standard_normal((1, 2))), prev.c)
    ones = const_mask(np.ones((1, 2)))
    out = R.zoneout_lstm_assemble(step, step.c_cand, step.h_cand, prev, ones, ones, TRAIN, 0.5, 0.5)
    assert out.c.data.tobytes() == prev.c.data.tobytes()
    assert out.h.data.tobytes() == prev.h.data.tobytes()


def test_zoneout_zero_masks_reduce_to_vanilla(rng):
    step, prev = fabricated_step(
        [[0.3, 0.6]], [[0.5, 0.9]], [[0.2, 0.8]], [[0.1, -0.4]], [[1.25, -2.5]]
    )
    zeros = const_mask(np.zeros((1, 2)))
    out = R.zoneout_lstm_assemble(step, step.c_cand, step.h_cand, prev, zeros, zeros, TRAIN, 0.5, 0.5)
    assert np.array_equal(out.c.data, step.c_cand.data)
    assert np.array_equal(out.h.data, step.h_cand.data)


def test_zoneout_eval_is_convex_midpoint():
    step, _ = fabricated_step([[0.0]], [[0.0]], [[0.5]], [[0.0]], [[0.0]])
    prev = CellState(Tensor(np.array([[0.0]])), Tensor(np.array([[2.0]])))
    out = R.zoneout_lstm_assemble(step, step.c_cand, step.h_cand, prev, None, None, EVAL, 0.5, 0.5)
    assert out.c.item() == 1.0  # 0.5*2 + 0.5*0


def test_zoneout_eval_h_uses_cell_candidate():
    # h_eval = z_h*h_prev + (1-z_h)*o*tanh(c_cand), NOT tanh of the mixed cell
    i, f, o, g = [[1.0]], [[1.0]], [[0.5]], [[0.9]]
    step, _ = fabricated_step(i, f, o, g, [[2.0]])
    prev = CellState(Tensor(np.array([[0.25]])), Tensor(np.array([[2.0]])))
    out = R.zoneout_lstm_assemble(step, step.c_cand, step.h_cand, prev, None, None, EVAL, 0.5, 0.1)
    c_cand = 1.0 * 2.0 + 1.0 * 0.9
    expect_h = 0.1 * 0.25 + 0.9 * (0.5 * np.tanh(c_cand))
    assert abs(out.h.item() - expect_h) < 1e-15
    assert abs(out.c.item() - (0.5 * 2.0 + 0.5 * c_cand)) < 1e-15


def test_zoneout_simple_selects_elementwise():
    h_prev = Tensor(np.array([[1.0, 2.0]]))
    h_cand = Tensor(np.array([[3.0, 4.0]]))
    out = R.zoneout_simple_assemble(h_cand, h_prev, const_mask([[1.0, 0.0]]), TRAIN, 0.5)
    assert np.array_equal(out.data, [[1.0, 4.0]])
    assert np.array_equal(
        R.zoneout_simple_assemble(h_cand, h_prev, const_mask([[1.0, 1.0]]), TRAIN, 0.5).data,
        h_prev.data,
    )
    assert np.array_equal(
        R.zoneout_simple_assemble(h_cand, h_prev, const_mask([[0.0, 0.0]]), TRAIN, 0.5).data,
        h_cand.data,
    )


def test_train_mode_without_masks_is_an_error():
    h = Tensor(np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        R.zoneout_simple_assemble(h, h, None, TRAIN, 0.5)
    with pytest.raises(ConfigError):
        R.zoneout_simple_assemble(h, h, None, "test", 0.5)


# ---------------------------------------------------------------------------
# dropout-family assembly


def test_recurrent_dropout_masked_cell_decays_by_forget_gate():
    step, prev = fabricated_step([[0.4]], [[0.7]], [[0.5]], [[0.8]], [[1.5]])
    out = R.recurrent_dropout_assemble(step, prev, const_mask([[0.0]]), TRAIN, 0.25)
    assert abs(out.c.item() - 0.7 * 1.5) < 1e-15  # no additive contribution
    out = R.recurrent_dropout_assemble(step, prev, const_mask([[1.0]]), TRAIN, 0.25)
    assert np.array_equal(out.c.data, step.c_cand.data)
    assert np.array_equal(out.h.data, step.h_cand.data)


def test_recurrent_dropout_eval_expectation():
    # f*c_prev = 0.1, i*g = 0.4, p = 0.25 -> c = 0.1 + 0.75*0.4 = 0.4
    step, prev = fabricated_step([[1.0]], [[0.1]], [[0.5]], [[0.4]], [[1.0]])
    out = R.recurrent_dropout_assemble(step, prev, None, EVAL, 0.25)
    assert abs(out.c.item() - 0.4) < 1e-15


def test_naive_cell_dropout_cases():
    step, prev = fabricated_step([[1.0]], [[0.0]], [[0.5]], [[0.8]], [[1.0]])
    out = R.naive_cell_dropout_assemble(step, step.c_cand, prev, const_mask([[1.0]]), TRAIN, 0.5)
    assert np.array_equal(out.c.data, step.c_cand.data)
    out = R.naive_cell_dropout_assemble(step, step.c_cand, prev, const_mask([[0.0]]), TRAIN, 0.5)
    assert out.c.item() == 0.0
    assert out.h.item() == 0.0
    out = R.naive_cell_dropout_assemble(step, step.c_cand, prev, None, EVAL, 0.5)
    assert abs(out.c.item() - 0.5 * 0.8) < 1e-15


def test_output_gate_reuse_polarity():
    # d=0: fully vanilla step with o_t; d=1: cell decays by f, h uses o_prev
    step, prev = fabricated_step([[0.4]], [[0.7]], [[0.2]], [[0.8]], [[1.5]])
    o_prev = Tensor(np.array([[0.6]]))
    out = R.output_gate_reuse_assemble(step, o_prev, prev, const_mask([[0.0]]), TRAIN, 0.5)
    assert np.array_equal(out.c.data, step.c_cand.data)
    assert abs(out.h.item() - 0.2 * np.tanh(step.c_cand.item())) < 1e-15
    out = R.output_gate_reuse_assemble(step, o_prev, prev, const_mask([[1.0]]), TRAIN, 0.5)
    assert abs(out.c.item() - 0.7 * 1.5) < 1e-15
    assert abs(out.h.item() - 0.6 * np.tanh(0.7 * 1.5)) < 1e-15


def test_output_gate_reuse_eval_midpoint():
    # p=0.5, o_t=0.2, o_prev=0.6, tanh(c_t)=1 -> h = 0.4
    step, prev = fabricated_step([[0.0]], [[1.0]], [[0.2]], [[0.0]], [[1000.0]])
    o_prev = Tensor(np.array([[0.6]]))
    out = R.output_gate_reuse_assemble(step, o_prev, prev, None, EVAL, 0.5)
    assert abs(out.h.item() - 0.4) < 1e-12
    with pytest.raises(ShapeError):
        R.output_gate_reuse_assemble(step, None, prev, None, EVAL, 0.5)


def test_output_gate_reuse_eval_matches_train_expectation(rng):
    """Monte-Carlo check of the eval rule (expectation of the train noise)."""
    step, prev = fabricated_step([[0.4]], [[0.7]], [[0.2]], [[0.8]], [[1.5]])
    prev = CellState(Tensor(np.zeros((1, 1))), prev.c)
    o_prev = Tensor(np.array([[0.6]]))
    p = 0.3
    n = 20000
    acc_h = 0.0
    acc_c = 0.0
    for _ in range(n):
        d = const_mask([[float(rng.random() < p)]])
        out = R.output_gate_reuse_assemble(step, o_prev, prev, d, TRAIN, p)
        acc_h += out.h.item()
        acc_c += out.c.item()
    ev = R.output_gate_reuse_assemble(step, o_prev, prev, None, EVAL, p)
    assert abs(acc_c / n - ev.c.item()) < 3 * 0.5 / np.sqrt(n)
    assert abs(acc_h / n - ev.h.item()) < 3 * 0.5 / np.sqrt(n)


def test_stochastic_depth_cases(rng):
    step, _ = fabricated_step([[0.4, 0.1]], [[0.7, 0.3]], [[0.2, 0.9]], [[0.8, -0.5]], [[1.5, -0.7]])
    prev = CellState(Tensor(rng.standard_normal((1, 2))), Tensor(rng.standard_normal((1, 2))))
    cand = CellState(step.h_cand, step.c_cand)
    drawn = R.stochastic_depth_assemble(cand, prev, const_mask(np.ones((1, 2))), TRAIN, 0.05)
    assert drawn.h.data.tobytes() == prev.h.data.tobytes()
    assert drawn.c.data.tobytes() == prev.c.data.tobytes()
    kept = R.stochastic_depth_assemble(cand, prev, const_mask(np.zeros((1, 2))), TRAIN, 0.05)
    assert np.array_equal(kept.h.data, step.h_cand.data)
    assert np.array_equal(kept.c.data, step.c_cand.data)


# ---------------------------------------------------------------------------
# trajectory-level invariants (unroll)


def lstm_lm(rng, vocab=5, hidden=6):
    return M.build_model("lstm", 1, vocab, hidden, vocab, rng, scale=0.2)


def run_states(model, inputs, reg, mode, seed=9):
    xs = M.encode_inputs(model, inputs)
    res = M.unroll(model, xs, reg, mode, MaskSource(seed))
    return res.top_states


def test_zoneout_z0_matches_unregularized_bitwise(rng):
    model = lstm_lm(rng)
    inputs = rng.integers(0, 5, size=(3, 50))
    plain = run_states(model, inputs, RegularizerConfig(None), TRAIN)
    zoned_train = run_states(model, inputs, RegularizerConfig(Zoneout(0.0, 0.0)), TRAIN)
    zoned_eval = run_states(model, inputs, RegularizerConfig(Zoneout(0.0, 0.0)), EVAL)
    for a, b, c in zip(plain, zoned_train, zoned_eval):
        assert a.h.data.tobytes() == b.h.data.tobytes() == c.h.data.tobytes()
        assert a.c.data.tobytes() == b.c.data.tobytes() == c.c.data.tobytes()


def test_zoneout_z1_keeps_initial_state_for_50_steps(rng):
    model = lstm_lm(rng)
    inputs = rng.integers(0, 5, size=(3, 50))
    states = run_states(model, inputs, RegularizerConfig(Zoneout(1.0, 1.0)), TRAIN)
    init = model.initial_states(3)[0]
    for st in states:
        assert st.h.data.tobytes() == init.h.data.tobytes()
        assert st.c.data.tobytes() == init.c.data.tobytes()


def test_stochastic_depth_z0_matches_unregularized_bitwise(rng):
    model = lstm_lm(rng)
    inputs = rng.integers(0, 5, size=(2, 20))
    plain = run_states(model, inputs, RegularizerConfig(None), TRAIN)
    depth = run_states(model, inputs, RegularizerConfig(StochasticDepth(0.0)), TRAIN)
    for a, b in zip(plain, depth):
        assert a.h.data.tobytes() == b.h.data.tobytes()
        assert a.c.data.tobytes() == b.c.data.tobytes()


def test_eval_mode_is_deterministic_and_convex(rng):
    model = lstm_lm(rng)
    inputs = rng.integers(0, 5, size=(2, 8))
    reg = RegularizerConfig(Zoneout(0.5, 0.05))
    a = run_states(model, inputs, reg, EVAL, seed=1)
    b = run_states(model, inputs, reg, EVAL, seed=2)
    for sa, sb in zip(a, b):
        assert sa.h.data.tobytes() == sb.h.data.tobytes()
    # every eval state entry lies between preserved and candidate values
    xs = M.encode_inputs(model, inputs)
    state = model.initial_states(2)[0]
    for x in xs:
        step = C.lstm_step(model.cells[0], x, state)
        mixed = R.zoneout_lstm_assemble(
            step, step.c_cand, step.h_cand, state, None, None, EVAL, 0.5, 0.05
        )
        lo = np.minimum(state.c.data, step.c_cand.data)
        hi = np.maximum(state.c.data, step.c_cand.data)
        assert np.all(mixed.c.data >= lo - 1e-15) and np.all(mixed.c.data <= hi + 1e-15)
        state = mixed


def test_single_step_monte_carlo_mean_matches_eval(rng):
    """Spec invariant: 1e4 mask resamples vs eval within 3 standard errors."""
    hidden = 4
    step, _ = fabricated_step(
        rng.uniform(0.1, 0.9, (1, hidden)),
        rng.uniform(0.1, 0.9, (1, hidden)),
        rng.uniform(0.1, 0.9, (1, hidden)),
        rng.uniform(-0.9, 0.9, (1, hidden)),
        rng.standard_normal((1, hidden)),
    )
    prev = CellState(Tensor(rng.standard_normal((1, hidden))), Tensor(rng.standard_normal((1, hidden))))
    z_c, z_h = 0.5, 0.05
    n = 10_000
    draw_rng = R.stream_rng(1, "mc")
    sum_c = np.zeros((1, hidden))
    sum_h = np.zeros((1, hidden))
    for _ in range(n):
        d_c = R.sample_mask(MaskSpec(z_c), (1, hidden), draw_rng)
        d_h = R.sample_mask(MaskSpec(z_h), (1, hidden), draw_rng)
        out = R.zoneout_lstm_assemble(step, step.c_cand, step.h_cand, prev, d_c, d_h, TRAIN, z_c, z_h)
        sum_c += out.c.data
        sum_h += out.h.data
    ev = R.zoneout_lstm_assemble(step, step.c_cand, step.h_cand, prev, None, None, EVAL, z_c, z_h)
    se_c = np.abs(prev.c.data - step.c_cand.data) * np.sqrt(z_c * (1 - z_c) / n)
    se_h = np.abs(prev.h.data - step.h_cand.data) * np.sqrt(z_h * (1 - z_h) / n)
    assert np.all(np.abs(sum_c / n - ev.c.data) <= 3 * se_c + 1e-12)
    assert np.all(np.abs(sum_h / n - ev.h.data) <= 3 * se_h + 1e-12)


# ---------------------------------------------------------------------------
# weight noise and norm stabilizer


def test_weight_noise_sigma_zero_is_bitwise_noop(rng):
    t = T.parameter(rng.standard_normal((4, 4)))
    before = t.data.tobytes()
    noise = R.apply_weight_noise([t], 0.0, rng)
    assert t.data.tobytes() == before
    noise.restore()
    assert t.data.tobytes() == before


def test_weight_noise_std_within_chisquare_interval():
    t = T.parameter(np.zeros(1_000_000))
    noise = R.apply_weight_noise([t], 0.075, R.stream_rng(3, "noise"))
    assert 0.0746 <= t.data.std() <= 0.0754
    noise.restore()
    assert np.all(t.data == 0.0)


def test_weight_noise_restores_clean_values(rng):
    t = T.parameter(rng.standard_normal((3, 3)))
    clean = t.data.copy()
    noise = R.apply_weight_noise([t], 0.5, rng)
    assert not np.array_equal(t.data, clean)
    noise.restore()
    assert np.array_equal(t.data, clean)


def test_norm_stabilizer_zero_for_constant_norms():
    h1 = Tensor(np.array([[3.0, 4.0]]))  # norm 5
    h2 = Tensor(np.array([[5.0, 0.0]]))  # norm 5
    pen = R.norm_stabilizer_penalty([h1, h2], 50.0, h_prev=h1)
    assert pen.item() == 0.0


def test_norm_stabilizer_hand_case():
    # h_0 = 0, ||h_1|| = 1, ||h_2|| = 2, beta = 50, T = 2 -> 50 * (1/2) * (1+1) = 50
    h1 = Tensor(np.array([[1.0, 0.0]]))
    h2 = Tensor(np.array([[0.0, 2.0]]))
    pen = R.norm_stabilizer_penalty([h1, h2], 50.0)
    assert abs(pen.item() - 50.0) < 1e-12


def test_norm_stabilizer_matches_direct_recomputation(rng):
    steps, batch, hidden = 5, 3, 4
    hs = [Tensor(rng.standard_normal((batch, hidden))) for _ in range(steps)]
    beta = 7.5
    pen = R.norm_stabilizer_penalty(hs, beta)
    norms = np.stack([np.linalg.norm(h.data, axis=1) for h in hs])
    norms = np.vstack([np.zeros(batch), norms])
    expect = beta * np.mean(np.sum(np.diff(norms, axis=0) ** 2, axis=0) / steps)
    assert abs(pen.item() - expect) < 1e-10
    with pytest.raises(ShapeError):
        R.norm_stabilizer_penalty([], beta)


def test_norm_stabilizer_gradients_pass_finite_differences(rng):
    batch, hidden = 2, 3
    h1 = T.parameter(rng.standard_normal((batch, hidden)))
    h2 = T.parameter(rng.standard_normal((batch, hidden)))

    def loss_fn():
        return R.norm_stabilizer_penalty([h1, h2], 3.0)

    for p, analytic in zip([h1, h2], analytic_grads(loss_fn, [h1, h2])):
        numeric = numeric_grad(lambda: loss_fn().item(), p.data)
        assert rel_err(analytic, numeric) < 1e-4
