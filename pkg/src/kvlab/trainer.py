"""Training loops: plain next-token pre-training of the toy model, stochastic
gate learning under a sparsity constraint, and a reconstruction-driven
alternative that fits continuous per-head interpolation weights.

All loops are deterministic in (config, seed); metrics stream to CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, TrainingDiverged
from .gates import (
    GateParams,
    SparsitySchedule,
    expected_sparsity,
    expected_sparsity_node,
    lagrangian_penalty_node,
    sample_gates_node,
    target_at,
)
from .model import ModelConfig, StreamingSpec, init_weights, lm_graph, weight_nodes

METRICS_FIELDS = ("step", "nll", "expected_sparsity", "target", "lambda1", "lambda2")


LOSS_MODES = ("plain_lm", "prulong", "duo")


@dataclass(frozen=True)
class GapCurriculum:
    """Loss-paced difficulty ramp for retrieval pre-training: the gap bound
    handed to data_fn advances by one whenever the recent mean loss drops
    below advance_below (or a stall times out), up to cap."""
    cap: int
    advance_below: float = 1.5
    check_every: int = 50
    stall_limit: int = 2000
    stop_when_stretched: bool = True

    def __post_init__(self):
        if self.cap < 0:
            raise ConfigurationError("cap must be >= 0")
        if self.check_every < 1 or self.stall_limit < 1:
            raise ConfigurationError("check_every and stall_limit must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    seq_len: int = 512
    batch_tokens: int = 512
    lr_weights: float = 0.0          # 0 freezes the base model
    lr_log_alpha: float = 1.0
    lr_lambda: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    warmup_frac: float = 0.1
    final_lr_frac: float = 0.01
    grad_clip: float = 1.0
    duo_l1: float = 0.05
    divergence_nll: float = 30.0
    loss_mode: str = "plain_lm"
    schedule: Optional[SparsitySchedule] = None
    curriculum: Optional[GapCurriculum] = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.seq_len < 2:
            raise ConfigurationError("seq_len must be >= 2")
        if self.batch_tokens < self.seq_len:
            raise ConfigurationError("batch_tokens must cover one sequence")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ConfigurationError("warmup_frac must lie in [0,1)")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}")

    @property
    def sequences_per_step(self) -> int:
        return max(1, self.batch_tokens // self.seq_len)


def lr_at(config: TrainConfig, step: int) -> float:
    """Multiplier on the peak rate: 0 at step 0, 1 at the end of warmup,
    linear down to final_lr_frac at step == steps."""
    if not (0 <= step <= config.steps):
        raise ContractError("step outside the run")
    warmup = max(1, int(round(config.warmup_frac * config.steps)))
    if step <= warmup:
        return step / warmup
    span = config.steps - warmup
    return 1.0 + (step - warmup) / span * (config.final_lr_frac - 1.0)


class Adam:
    """Per-parameter moment tracking keyed by name."""

    def __init__(self, beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def update(self, key, param: np.ndarray, grad: np.ndarray, lr: float,
               maximize: bool = False) -> np.ndarray:
        if key not in self.m:
            self.m[key] = np.zeros_like(param, dtype=np.float64)
            self.v[key] = np.zeros_like(param, dtype=np.float64)
            self.t[key] = 0
        self.t[key] += 1
        t = self.t[key]
        self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * grad
        self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * grad * grad
        m_hat = self.m[key] / (1 - self.beta1 ** t)
        v_hat = self.v[key] / (1 - self.beta2 ** t)
        step = lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return param + step if maximize else param - step


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    """Jointly rescale a gradient dict so its global L2 norm is <= max_norm."""
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float(np.sum(np.asarray(g) ** 2)) for g in grads.values()))
    if total <= max_norm:
        return grads
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}


def next_token_nll(logits: T.Node, targets) -> T.Node:
    """Mean NLL of targets under rows of logits (one target per row)."""
    return T.cross_entropy_mean(logits, np.asarray(targets, dtype=np.int64))


def nll_value(logits: np.ndarray, targets) -> float:
    """Numpy evaluation twin of next_token_nll for scoring."""
    targets = np.asarray(targets, dtype=np.int64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(len(targets)), targets]
    return float(np.mean(logz - picked))


def _batch_nll(tape, model_config, wnodes, seqs, z=None,
               spec: StreamingSpec = StreamingSpec()) -> T.Node:
    """Mean NLL over sequences. An item may be a plain token array (loss on
    every next-token position) or (tokens, answer_positions) restricting the
    loss to predicting the listed positions."""
    losses = []
    for item in seqs:
        seq, answers = item if isinstance(item, tuple) else (item, None)
        logits, _ = lm_graph(tape, model_config, wnodes, seq, z=z, spec=spec)
        if answers is None:
            keep = T.gather_rows(logits, np.arange(len(seq) - 1))
            losses.append(next_token_nll(keep, seq[1:]))
        else:
            answers = np.asarray(answers, dtype=np.int64)
            if len(answers) == 0 or answers.min() < 1 or answers.max() >= len(seq):
                raise ContractError("answer positions must lie in [1, len(seq))")
            keep = T.gather_rows(logits, answers - 1)
            losses.append(next_token_nll(keep, seq[answers]))
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / len(losses))


def _check_finite(nll: float, limit: float, step: int):
    if not np.isfinite(nll) or nll > limit:
        raise TrainingDiverged(f"nll {nll} at step {step}")


class MetricsWriter:
    def __init__(self, path: Optional[str]):
        self.path = path
        self.rows: list[dict] = []

    def add(self, **row):
        self.rows.append(row)

    def flush(self):
        if self.path is None:
            return
        with open(self.path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row.get(k, "") for k in METRICS_FIELDS})


# --------------------------------------------------------------------------
# plain language-model pre-training


def pretrain_lm(model_config: ModelConfig, config: TrainConfig,
                data_fn: Callable[..., np.ndarray],
                metrics_path: Optional[str] = None,
                init: Optional[dict] = None) -> dict:
    """Train all weights by next-token NLL on sequences from data_fn.
    Zero steps returns the (seeded) initial weights untouched.

    Without a curriculum, data_fn is called as data_fn(rng) and may return
    tokens or (tokens, answer_positions). With config.curriculum set it is
    called as data_fn(rng, gap) where gap is the current difficulty bound."""
    rng = np.random.default_rng(config.seed)
    weights = {k: v.copy() for k, v in (init or init_weights(model_config, rng)).items()}
    adam = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
    metrics = MetricsWriter(metrics_path)
    cur = config.curriculum
    gap, last_advance = 0, 0
    recent: list[float] = []
    for step in range(config.steps):
        if cur is None:
            seqs = [data_fn(rng) for _ in range(config.sequences_per_step)]
        else:
            seqs = [data_fn(rng, gap) for _ in range(config.sequences_per_step)]
        tape = T.Tape()
        wnodes = weight_nodes(tape, weights, trainable=True)
        loss = _batch_nll(tape, model_config, wnodes, seqs)
        _check_finite(loss.value, config.divergence_nll, step)
        raw = T.backward(tape, loss)
        grads = clip_global_norm(
            {k: raw[wnodes[k]] for k in weights if wnodes[k] in raw}, config.grad_clip)
        lr = config.lr_weights * lr_at(config, step + 1)
        for k, g in grads.items():
            weights[k] = adam.update(k, weights[k], g, lr)
        metrics.add(step=step, nll=float(loss.value))
        if cur is not None:
            recent.append(float(loss.value))
            if (step + 1) % cur.check_every == 0:
                mean = float(np.mean(recent[-cur.check_every:]))
                settled = mean < cur.advance_below
                if gap < cur.cap and (settled or step - last_advance > cur.stall_limit):
                    gap += 1
                    last_advance = step
                elif gap >= cur.cap and settled and cur.stop_when_stretched:
                    break
    metrics.flush()
    return weights


# --------------------------------------------------------------------------
# constrained gate training


@dataclass
class PrulongState:
    gates: GateParams
    adam_alpha: Adam
    adam_lambda: Adam
    adam_weights: Adam
    rng: np.random.Generator
    step: int = 0


def init_prulong(model_config: ModelConfig, config: TrainConfig,
                 init_log_alpha: float = 2.0) -> PrulongState:
    rng = np.random.default_rng(config.seed)
    la = np.full((model_config.num_layers, model_config.num_query_heads),
                 init_log_alpha, dtype=np.float64)
    la += 0.01 * rng.normal(size=la.shape)   # tiny symmetry breaking
    return PrulongState(
        gates=GateParams(log_alpha=la),
        adam_alpha=Adam(config.adam_beta1, config.adam_beta2, config.adam_eps),
        adam_lambda=Adam(config.adam_beta1, config.adam_beta2, config.adam_eps),
        adam_weights=Adam(config.adam_beta1, config.adam_beta2, config.adam_eps),
        rng=rng,
    )


def prulong_step(state: PrulongState, model_config: ModelConfig, weights: dict,
                 config: TrainConfig, schedule: SparsitySchedule, seqs,
                 spec: StreamingSpec = StreamingSpec()) -> dict:
    """One constrained step: descend log_alpha (and weights when unfrozen) on
    NLL + penalty; ascend the multipliers on the same penalty."""
    target = target_at(schedule, min(state.step + 1, schedule.total_steps))
    gates = state.gates
    tape = T.Tape()
    frozen = config.lr_weights == 0.0
    wnodes = weight_nodes(tape, weights, trainable=not frozen)
    la = tape.leaf(gates.log_alpha, trainable=True)
    l1 = tape.leaf(np.float64(gates.lambda1), trainable=True)
    l2 = tape.leaf(np.float64(gates.lambda2), trainable=True)
    z = sample_gates_node(tape, la, gates, state.rng)
    nll = _batch_nll(tape, model_config, wnodes, seqs, z=z, spec=spec)
    _check_finite(nll.value, config.divergence_nll, state.step)
    s_node = expected_sparsity_node(tape, la, gates)
    penalty = lagrangian_penalty_node(tape, s_node, l1, l2, target)
    loss = T.add(nll, penalty)
    raw = T.backward(tape, loss)

    descent = {"log_alpha": raw[la]}
    if not frozen:
        for k in weights:
            if wnodes[k] in raw:
                descent[k] = raw[wnodes[k]]
    descent = clip_global_norm(descent, config.grad_clip)

    mult = lr_at(config, min(state.step + 1, config.steps))
    gates.log_alpha = state.adam_alpha.update(
        "log_alpha", gates.log_alpha, descent["log_alpha"],
        config.lr_log_alpha * mult)
    gates.lambda1 = float(state.adam_lambda.update(
        "lambda1", np.float64(gates.lambda1), raw[l1],
        config.lr_lambda * mult, maximize=True))
    gates.lambda2 = float(state.adam_lambda.update(
        "lambda2", np.float64(gates.lambda2), raw[l2],
        config.lr_lambda * mult, maximize=True))
    if not frozen:
        lr_w = config.lr_weights * mult
        for k in weights:
            if k in descent:
                weights[k] = state.adam_weights.update(k, weights[k], descent[k], lr_w)
    gates.target = target
    state.step += 1
    return {
        "step": state.step - 1,
        "nll": float(nll.value),
        "expected_sparsity": expected_sparsity(gates),
        "target": target,
        "lambda1": gates.lambda1,
        "lambda2": gates.lambda2,
    }


def run_prulong(model_config: ModelConfig, weights: dict, config: TrainConfig,
                data_fn: Callable[[np.random.Generator], np.ndarray],
                metrics_path: Optional[str] = None,
                spec: StreamingSpec = StreamingSpec()) -> GateParams:
    schedule = config.schedule
    if schedule is None:
        raise ConfigurationError("constrained gate training needs a sparsity schedule")
    state = init_prulong(model_config, config)
    metrics = MetricsWriter(metrics_path)
    for _ in range(config.steps):
        seqs = [data_fn(state.rng) for _ in range(config.sequences_per_step)]
        metrics.add(**prulong_step(state, model_config, weights, config, schedule,
                                   seqs, spec=spec))
    metrics.flush()
    return state.gates


# --------------------------------------------------------------------------
# reconstruction-driven continuous gates


def duo_step(z: np.ndarray, adam: Adam, model_config: ModelConfig, weights: dict,
             config: TrainConfig, seqs, step: int,
             spec: StreamingSpec = StreamingSpec()) -> tuple[np.ndarray, dict]:
    """Descend z on || final hidden (gated) - final hidden (all-full) ||^2 / N
    plus an L1 pull toward 0; z is clamped to [0,1] afterwards."""
    tape = T.Tape()
    wnodes = weight_nodes(tape, weights, trainable=False)
    zn = tape.leaf(z, trainable=True)
    recon_terms = []
    for seq in seqs:
        _, hidden_full = lm_graph(tape, model_config, wnodes, seq, spec=spec)
        target = tape.const(hidden_full.value)   # detached reconstruction target
        _, hidden_z = lm_graph(tape, model_config, wnodes, seq, z=zn, spec=spec)
        diff = T.add(hidden_z, T.scale(target, -1.0))
        recon_terms.append(T.scale(T.sum_all(T.mul(diff, diff)),
                                   1.0 / hidden_full.value.size))
    recon = recon_terms[0]
    for extra in recon_terms[1:]:
        recon = T.add(recon, extra)
    recon = T.scale(recon, 1.0 / len(recon_terms))
    loss = T.add(recon, T.scale(T.sum_all(zn), config.duo_l1))
    raw = T.backward(tape, loss)
    grads = clip_global_norm({"z": raw[zn]}, config.grad_clip)
    lr = config.lr_log_alpha * lr_at(config, min(step + 1, config.steps))
    z_new = np.clip(adam.update("z", z, grads["z"], lr), 0.0, 1.0)
    return z_new, {"step": step, "nll": float(recon.value),
                   "expected_sparsity": float(1.0 - z_new.mean())}


def run_duo(model_config: ModelConfig, weights: dict, config: TrainConfig,
            data_fn: Callable[[np.random.Generator], np.ndarray],
            metrics_path: Optional[str] = None,
            spec: StreamingSpec = StreamingSpec()) -> np.ndarray:
    """Returns the trained (layers, heads) interpolation weights in [0,1],
    starting from all ones (exact reconstruction, zero loss)."""
    rng = np.random.default_rng(config.seed)
    z = np.ones((model_config.num_layers, model_config.num_query_heads))
    adam = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
    metrics = MetricsWriter(metrics_path)
    for step in range(config.steps):
        seqs = [data_fn(rng) for _ in range(config.sequences_per_step)]
        z, row = duo_step(z, adam, model_config, weights, config, seqs, step, spec=spec)
        metrics.add(**row)
    metrics.flush()
    return z
