import numpy as np
import pytest

from kvlab import tensor as T
from kvlab.errors import ConfigurationError, ContractError
from kvlab.gates import (
    GateParams,
    SparsitySchedule,
    discretize,
    expected_sparsity,
    expected_sparsity_node,
    gate_values_from_uniform,
    lagrangian_penalty,
    lagrangian_penalty_node,
    load_gates,
    load_mask_table,
    prob_active,
    sample_gates,
    sample_gates_node,
    save_gates,
    save_mask_table,
    target_at,
)
from kvlab.model import HeadKind


def params_with(log_alpha, **kw):
    return GateParams(log_alpha=np.asarray(log_alpha, dtype=float), **kw)


def test_median_noise_gives_half():
    # u = 0.5 makes the noise vanish; zero logit then lands exactly on 0.5
    p = params_with([[0.0]])
    z = gate_values_from_uniform(np.array([[0.5]]), p)
    assert z[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_prob_active_closed_form_frozen_value():
    p = params_with([[0.0]])
    # sigma(1.5 * ln(11)) with the default stretch and temperature
    assert prob_active(p)[0, 0] == pytest.approx(0.9733, abs=5e-4)


def test_prob_active_matches_monte_carlo():
    p = params_with([[0.0]])
    rng = np.random.default_rng(7)
    u = rng.uniform(p.uniform_eps, 1 - p.uniform_eps, size=(1_000_000, 1))
    z = gate_values_from_uniform(u, params_with([[0.0] * 1]))
    assert (z > 0).mean() == pytest.approx(prob_active(p)[0, 0], abs=2e-3)


def test_exact_endpoints_have_mass():
    p = params_with([[0.0]])
    rng = np.random.default_rng(0)
    z = np.array([sample_gates(p, rng)[0, 0] for _ in range(20_000)])
    assert (z == 0.0).sum() > 0
    assert (z == 1.0).sum() > 0
    assert np.all((z >= 0) & (z <= 1))


def test_extreme_logits_saturate():
    rng = np.random.default_rng(3)
    hi = sample_gates(params_with([[40.0] * 4]), rng)
    lo = sample_gates(params_with([[-40.0] * 4]), rng)
    assert np.all(hi == 1.0)
    assert np.all(lo == 0.0)


def test_sampler_and_node_agree():
    p = params_with(np.linspace(-2, 2, 6).reshape(2, 3))
    direct = sample_gates(p, np.random.default_rng(11))
    tape = T.Tape()
    la = tape.leaf(p.log_alpha, trainable=True)
    node = sample_gates_node(tape, la, p, np.random.default_rng(11))
    np.testing.assert_array_equal(direct, node.value)


def test_sampled_gate_gradient_matches_finite_difference():
    # probe a draw that stays strictly inside (0,1) so the clamp is smooth
    rng = np.random.default_rng(5)
    u = rng.uniform(0.4, 0.6, size=(2, 3))

    def build(tape, x):
        p = params_with(np.zeros((2, 3)))
        noise = tape.const(np.log(u) - np.log1p(-u))
        s = T.sigmoid(T.scale(T.add(noise, x), 1.0 / p.temperature))
        stretched = T.add(T.scale(s, p.stretch_high - p.stretch_low),
                          tape.const(p.stretch_low))
        z = T.clamp01(stretched)
        assert np.all((z.value > 0) & (z.value < 1))
        return T.sum_all(T.mul(z, z))

    err = T.finite_diff_check(build, np.zeros((2, 3)))
    assert err < 1e-6


def test_expected_sparsity_node_matches_and_differentiates():
    la = np.linspace(-1.5, 2.5, 8).reshape(2, 4)
    p = params_with(la)
    tape = T.Tape()
    node = expected_sparsity_node(tape, tape.leaf(la, trainable=True), p)
    assert node.value == pytest.approx(expected_sparsity(p), abs=1e-12)

    def build(tape, x):
        return expected_sparsity_node(tape, x, p)

    assert T.finite_diff_check(build, la) < 1e-6


def test_penalty_worked_value():
    p = params_with([[0.0]], lambda1=2.0, lambda2=3.0, target=0.4)
    assert lagrangian_penalty(0.5, p) == pytest.approx(0.23, abs=1e-12)


def test_penalty_node_matches_scalar():
    tape = T.Tape()
    pen = lagrangian_penalty_node(tape, tape.const(0.5), tape.const(2.0),
                                  tape.const(3.0), 0.4)
    assert pen.value == pytest.approx(0.23, abs=1e-12)


def test_penalty_gradients_split_by_role():
    # ascent on the multipliers sees the raw gap terms
    tape = T.Tape()
    s = tape.leaf(np.float64(0.5), trainable=True)
    l1 = tape.leaf(np.float64(2.0), trainable=True)
    l2 = tape.leaf(np.float64(3.0), trainable=True)
    pen = lagrangian_penalty_node(tape, s, l1, l2, 0.4)
    grads = T.backward(tape, pen)
    assert grads[l1] == pytest.approx(0.1)
    assert grads[l2] == pytest.approx(0.01)
    assert grads[s] == pytest.approx(2.0 + 2 * 3.0 * 0.1)


def test_target_ramp():
    sched = SparsitySchedule(warmup_steps=800, final_target=0.7, total_steps=1000)
    assert target_at(sched, 0) == 0.0
    assert target_at(sched, 400) == pytest.approx(0.35)
    assert target_at(sched, 800) == pytest.approx(0.7)
    assert target_at(sched, 1000) == pytest.approx(0.7)
    with pytest.raises(ContractError):
        target_at(sched, 1001)


def test_discretize_counts_and_tie_order():
    la = np.array([[0.5, -1.0], [0.3, -1.0]])
    modes = discretize(la, 0.5)
    kinds = [[m.kind for m in row] for row in modes]
    assert kinds[0][1] is HeadKind.STREAMING
    assert kinds[1][1] is HeadKind.STREAMING
    assert kinds[0][0] is HeadKind.FULL
    assert kinds[1][0] is HeadKind.FULL
    # a three-way tie at the cut is broken toward earlier (layer, head)
    tied = discretize(np.zeros((2, 2)), 0.25)
    streaming = [(l, h) for l in range(2) for h in range(2)
                 if tied[l][h].kind is HeadKind.STREAMING]
    assert streaming == [(0, 0)]


def test_discretize_depends_only_on_ordering():
    rng = np.random.default_rng(2)
    la = rng.normal(size=(3, 4))
    for s in (0.0, 0.25, 0.5, 0.9, 1.0):
        base = discretize(la, s)
        assert discretize(3.0 * la + 7.0, s) == base
        assert discretize(np.exp(la), s) == base


def test_discretize_monotone_in_sparsity():
    rng = np.random.default_rng(4)
    la = rng.normal(size=(3, 4))
    prev: set = set()
    for s in np.linspace(0, 1, 13):
        cur = {(l, h) for l in range(3) for h in range(4)
               if discretize(la, s)[l][h].kind is HeadKind.STREAMING}
        assert prev <= cur
        prev = cur


def test_gate_roundtrip(tmp_path):
    p = params_with(np.arange(6, dtype=float).reshape(2, 3) / 7,
                    lambda1=1.25, lambda2=0.5, target=0.3)
    save_gates(tmp_path / "g.json", p)
    q = load_gates(tmp_path / "g.json")
    np.testing.assert_array_equal(p.log_alpha, q.log_alpha)
    assert (q.lambda1, q.lambda2, q.target) == (1.25, 0.5, 0.3)
    modes = discretize(p.log_alpha, 0.5)
    save_mask_table(tmp_path / "m.json", modes)
    assert load_mask_table(tmp_path / "m.json") == modes


def test_validation():
    with pytest.raises(ConfigurationError):
        params_with(np.zeros(3))
    with pytest.raises(ConfigurationError):
        params_with(np.zeros((2, 2)), temperature=0.0)
    with pytest.raises(ConfigurationError):
        params_with(np.zeros((2, 2)), stretch_low=0.1)
    with pytest.raises(ConfigurationError):
        SparsitySchedule(warmup_steps=0, final_target=0.5, total_steps=10)
