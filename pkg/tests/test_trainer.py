import csv

import numpy as np
import pytest

from kvlab import tensor as T
from kvlab.errors import ConfigurationError, ContractError, TrainingDiverged
from kvlab.gates import SparsitySchedule
from kvlab.model import ModelConfig, StreamingSpec, init_weights, lm_graph, weight_nodes
from kvlab.trainer import (
    METRICS_FIELDS,
    Adam,
    MetricsWriter,
    TrainConfig,
    clip_global_norm,
    init_prulong,
    lr_at,
    next_token_nll,
    nll_value,
    pretrain_lm,
    prulong_step,
    run_duo,
    run_prulong,
    duo_step,
)

TINY = ModelConfig(num_layers=2, num_query_heads=4, num_kv_heads=2, head_dim=8,
                   vocab_size=32, max_positions=64)
SPEC = StreamingSpec(sink_size=1, window_size=3)


def tiny_batch(rng, n=1, seq_len=16):
    return [rng.integers(0, TINY.vocab_size, size=seq_len) for _ in range(n)]


def fixed_data(seq):
    return lambda rng: seq


# --------------------------------------------------------------------------
# learning-rate schedule


def test_lr_schedule_endpoints():
    config = TrainConfig(steps=100, warmup_frac=0.1, final_lr_frac=0.01)
    assert lr_at(config, 0) == 0.0
    assert lr_at(config, 10) == 1.0
    assert lr_at(config, 100) == pytest.approx(0.01)


def test_lr_schedule_linear_in_both_phases():
    config = TrainConfig(steps=100, warmup_frac=0.1, final_lr_frac=0.01)
    assert lr_at(config, 5) == pytest.approx(0.5)
    assert lr_at(config, 55) == pytest.approx(1.0 + 0.5 * (0.01 - 1.0))


def test_lr_outside_run_rejected():
    config = TrainConfig(steps=10)
    with pytest.raises(ContractError):
        lr_at(config, -1)
    with pytest.raises(ContractError):
        lr_at(config, 11)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(steps=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig(steps=1, seq_len=1)
    with pytest.raises(ConfigurationError):
        TrainConfig(steps=1, seq_len=16, batch_tokens=8)
    with pytest.raises(ConfigurationError):
        TrainConfig(steps=1, warmup_frac=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(steps=1, loss_mode="adversarial")


def test_sequences_per_step_floor():
    config = TrainConfig(steps=1, seq_len=16, batch_tokens=40)
    assert config.sequences_per_step == 2


# --------------------------------------------------------------------------
# optimizer pieces


def test_adam_first_step_has_unit_scale():
    adam = Adam(0.9, 0.95, 1e-8)
    p = np.array([0.0, 0.0])
    out = adam.update("p", p, np.array([3.0, -0.5]), lr=0.1)
    assert np.allclose(out, [-0.1, 0.1], atol=1e-7)


def test_adam_zero_grad_is_noop():
    adam = Adam(0.9, 0.95, 1e-8)
    p = np.array([1.0, -2.0])
    out = adam.update("p", p, np.zeros(2), lr=0.1)
    assert np.array_equal(out, p)


def test_adam_maximize_flips_direction():
    adam_down = Adam(0.9, 0.95, 1e-8)
    adam_up = Adam(0.9, 0.95, 1e-8)
    p = np.zeros(3)
    g = np.array([1.0, -2.0, 0.5])
    down = adam_down.update("p", p, g, lr=0.05)
    up = adam_up.update("p", p, g, lr=0.05, maximize=True)
    assert np.allclose(up, -down)


def test_adam_tracks_keys_independently():
    adam = Adam(0.9, 0.95, 1e-8)
    a = adam.update("a", np.zeros(1), np.ones(1), lr=0.1)
    b = adam.update("b", np.zeros(1), np.ones(1), lr=0.1)
    assert np.allclose(a, b)
    assert adam.t == {"a": 1, "b": 1}


def test_clip_global_norm_rescales_jointly():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    clipped = clip_global_norm(grads, 1.0)
    total = np.sqrt(sum(np.sum(g ** 2) for g in clipped.values()))
    assert total == pytest.approx(1.0)
    assert np.allclose(clipped["a"] / clipped["b"][0], [0.75, 0.0])


def test_clip_global_norm_leaves_small_gradients_alone():
    grads = {"a": np.array([0.1])}
    assert clip_global_norm(grads, 1.0)["a"] is grads["a"]
    big = {"a": np.array([100.0])}
    assert clip_global_norm(big, 0.0)["a"] is big["a"]


# --------------------------------------------------------------------------
# loss


def test_nll_uniform_logits_is_log_vocab():
    logits = np.zeros((5, 32))
    assert nll_value(logits, np.arange(5)) == pytest.approx(np.log(32))


def test_nll_confident_correct_is_near_zero():
    targets = np.array([3, 7])
    logits = np.full((2, 32), -50.0)
    logits[0, 3] = 50.0
    logits[1, 7] = 50.0
    assert nll_value(logits, targets) < 1e-8


def test_nll_matches_direct_log_softmax():
    rng = np.random.default_rng(0)
    for _ in range(10):
        logits = rng.normal(size=(6, 9))
        targets = rng.integers(0, 9, size=6)
        logp = logits - np.log(np.sum(np.exp(logits), axis=-1, keepdims=True))
        direct = -np.mean(logp[np.arange(6), targets])
        assert nll_value(logits, targets) == pytest.approx(direct, rel=1e-12)
        tape = T.Tape()
        node = next_token_nll(tape.leaf(logits), targets)
        assert float(node.value) == pytest.approx(direct, rel=1e-12)


# --------------------------------------------------------------------------
# plain pre-training


def test_pretrain_zero_steps_returns_initial_weights():
    config = TrainConfig(steps=0, seq_len=16, batch_tokens=16, seed=4)
    weights = pretrain_lm(TINY, config, lambda rng: rng.integers(0, 32, size=16))
    expected = init_weights(TINY, np.random.default_rng(4))
    assert weights.keys() == expected.keys()
    for k in weights:
        assert np.array_equal(weights[k], expected[k])


def test_pretrain_zero_steps_keeps_warm_start():
    init = init_weights(TINY, np.random.default_rng(9))
    config = TrainConfig(steps=0, seq_len=16, batch_tokens=16, seed=4)
    weights = pretrain_lm(TINY, config, lambda rng: rng.integers(0, 32, size=16),
                          init=init)
    for k in init:
        assert np.array_equal(weights[k], init[k])
    assert weights["embed"] is not init["embed"]


def test_pretrain_loss_strictly_decreases_on_fixed_batch(tmp_path):
    seq = np.random.default_rng(3).integers(0, TINY.vocab_size, size=24)
    config = TrainConfig(steps=50, seq_len=24, batch_tokens=24,
                         lr_weights=3e-3, seed=1)
    path = tmp_path / "metrics.csv"
    pretrain_lm(TINY, config, fixed_data(seq), metrics_path=path)
    with open(path) as f:
        nlls = [float(row["nll"]) for row in csv.DictReader(f)]
    assert len(nlls) == 50
    assert all(b < a for a, b in zip(nlls, nlls[1:]))


def test_pretrain_is_deterministic():
    config = TrainConfig(steps=5, seq_len=16, batch_tokens=16,
                         lr_weights=1e-3, seed=7)
    data = lambda rng: rng.integers(0, TINY.vocab_size, size=16)
    first = pretrain_lm(TINY, config, data)
    second = pretrain_lm(TINY, config, data)
    for k in first:
        assert np.array_equal(first[k], second[k])


def test_pretrain_divergence_aborts():
    config = TrainConfig(steps=5, seq_len=16, batch_tokens=16,
                         lr_weights=1e-3, divergence_nll=0.1, seed=0)
    with pytest.raises(TrainingDiverged):
        pretrain_lm(TINY, config, lambda rng: rng.integers(0, 32, size=16))


def test_checkpoint_roundtrip_preserves_eval_loss(tmp_path):
    from kvlab.model import load_checkpoint, save_checkpoint

    config = TrainConfig(steps=3, seq_len=16, batch_tokens=16,
                         lr_weights=1e-3, seed=2)
    weights = pretrain_lm(TINY, config, lambda rng: rng.integers(0, 32, size=16))
    path = tmp_path / "model.json"
    save_checkpoint(path, TINY, weights)
    _, reloaded = load_checkpoint(path)

    seq = np.random.default_rng(5).integers(0, TINY.vocab_size, size=16)
    losses = []
    for w in (weights, reloaded):
        tape = T.Tape()
        wnodes = weight_nodes(tape, w, trainable=False)
        logits, _ = lm_graph(tape, TINY, wnodes, seq[:-1])
        losses.append(nll_value(logits.value, seq[1:]))
    assert abs(losses[0] - losses[1]) <= 1e-12


# --------------------------------------------------------------------------
# constrained gate training


def make_prulong(steps=4, **kwargs):
    defaults = dict(steps=steps, seq_len=16, batch_tokens=16,
                    loss_mode="prulong",
                    schedule=SparsitySchedule(warmup_steps=2, final_target=0.5,
                                              total_steps=steps),
                    seed=3)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def test_prulong_frozen_weights_bit_identical():
    rng = np.random.default_rng(0)
    weights = init_weights(TINY, rng)
    before = {k: v.tobytes() for k, v in weights.items()}
    config = make_prulong()
    state = init_prulong(TINY, config)
    for _ in range(3):
        prulong_step(state, TINY, weights, config, config.schedule,
                     tiny_batch(rng), spec=SPEC)
    assert {k: v.tobytes() for k, v in weights.items()} == before


def test_prulong_unfrozen_weights_move():
    rng = np.random.default_rng(0)
    weights = init_weights(TINY, rng)
    before = {k: v.copy() for k, v in weights.items()}
    config = make_prulong(lr_weights=1e-2)
    state = init_prulong(TINY, config)
    prulong_step(state, TINY, weights, config, config.schedule,
                 tiny_batch(rng), spec=SPEC)
    assert any(not np.array_equal(weights[k], before[k]) for k in weights)


def test_prulong_gates_move_and_metrics_shape():
    rng = np.random.default_rng(1)
    weights = init_weights(TINY, rng)
    config = make_prulong()
    state = init_prulong(TINY, config)
    before = state.gates.log_alpha.copy()
    row = prulong_step(state, TINY, weights, config, config.schedule,
                       tiny_batch(rng), spec=SPEC)
    assert not np.array_equal(state.gates.log_alpha, before)
    assert set(row) == set(METRICS_FIELDS)


def test_lambda_frozen_at_zero_rate():
    rng = np.random.default_rng(2)
    weights = init_weights(TINY, rng)
    config = make_prulong(lr_lambda=0.0)
    state = init_prulong(TINY, config)
    prulong_step(state, TINY, weights, config, config.schedule,
                 tiny_batch(rng), spec=SPEC)
    assert state.gates.lambda1 == 0.0
    assert state.gates.lambda2 == 0.0


def test_lambda_ascends_while_sparsity_exceeds_target():
    # target pinned at 0 while expected sparsity starts positive, so the
    # multiplier gradient (s - t) is positive and ascent must raise lambda1
    rng = np.random.default_rng(3)
    weights = init_weights(TINY, rng)
    config = make_prulong(schedule=SparsitySchedule(warmup_steps=1,
                                                    final_target=0.0,
                                                    total_steps=4))
    state = init_prulong(TINY, config)
    prulong_step(state, TINY, weights, config, config.schedule,
                 tiny_batch(rng), spec=SPEC)
    assert state.gates.lambda1 > 0.0
    assert state.gates.lambda2 > 0.0


def test_run_prulong_requires_schedule():
    rng = np.random.default_rng(0)
    weights = init_weights(TINY, rng)
    config = TrainConfig(steps=2, seq_len=16, batch_tokens=16, loss_mode="prulong")
    with pytest.raises(ConfigurationError):
        run_prulong(TINY, weights, config, lambda r: r.integers(0, 32, size=16))


def test_run_prulong_deterministic_and_streams_metrics(tmp_path):
    rng = np.random.default_rng(0)
    weights = init_weights(TINY, rng)
    config = make_prulong(steps=3)
    data = lambda r: r.integers(0, TINY.vocab_size, size=16)
    path = tmp_path / "metrics.csv"
    first = run_prulong(TINY, weights, config, data, metrics_path=path, spec=SPEC)
    second = run_prulong(TINY, weights, config, data, spec=SPEC)
    assert np.array_equal(first.log_alpha, second.log_alpha)
    assert first.lambda1 == second.lambda1
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3
    assert list(rows[0]) == list(METRICS_FIELDS)
    assert float(rows[-1]["target"]) > 0.0


def test_prulong_target_follows_schedule():
    rng = np.random.default_rng(4)
    weights = init_weights(TINY, rng)
    config = make_prulong(steps=4, schedule=SparsitySchedule(
        warmup_steps=2, final_target=0.4, total_steps=4))
    state = init_prulong(TINY, config)
    targets = [prulong_step(state, TINY, weights, config, config.schedule,
                            tiny_batch(rng), spec=SPEC)["target"]
               for _ in range(4)]
    assert targets == [pytest.approx(0.2), pytest.approx(0.4),
                       pytest.approx(0.4), pytest.approx(0.4)]


# --------------------------------------------------------------------------
# reconstruction-driven gates


def test_duo_all_ones_reconstruction_is_exactly_zero():
    rng = np.random.default_rng(5)
    weights = init_weights(TINY, rng)
    config = TrainConfig(steps=1, seq_len=16, batch_tokens=16, duo_l1=0.0,
                         loss_mode="duo", seed=0)
    z = np.ones((TINY.num_layers, TINY.num_query_heads))
    adam = Adam(0.9, 0.95, 1e-8)
    z_new, row = duo_step(z, adam, TINY, weights, config, tiny_batch(rng),
                          step=0, spec=SPEC)
    assert row["nll"] == 0.0
    assert np.array_equal(z_new, z)


def test_duo_l1_pulls_gates_down_within_bounds():
    rng = np.random.default_rng(6)
    weights = init_weights(TINY, rng)
    config = TrainConfig(steps=4, seq_len=16, batch_tokens=16, duo_l1=0.5,
                         lr_log_alpha=0.1, loss_mode="duo", seed=1)
    z = run_duo(TINY, weights, config,
                lambda r: r.integers(0, TINY.vocab_size, size=16), spec=SPEC)
    assert z.shape == (TINY.num_layers, TINY.num_query_heads)
    assert np.all(z >= 0.0) and np.all(z <= 1.0)
    assert z.mean() < 1.0


# --------------------------------------------------------------------------
# metrics plumbing


def test_metrics_writer_fixed_header(tmp_path):
    path = tmp_path / "m.csv"
    writer = MetricsWriter(path)
    writer.add(step=0, nll=1.5)
    writer.add(step=1, nll=1.25, target=0.5)
    writer.flush()
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_FIELDS)
    assert len(lines) == 3


def test_metrics_writer_disabled_without_path():
    writer = MetricsWriter(None)
    writer.add(step=0, nll=1.0)
    writer.flush()
