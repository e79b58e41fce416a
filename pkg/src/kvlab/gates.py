"""Stochastic relaxed-binary gates over attention heads.

Each (layer, head) pair carries a learnable logit; sampling pushes a logistic
noise variable through a temperature-scaled sigmoid, stretches the result past
[0, 1], and clamps, so exact 0s and 1s occur with finite probability. A pair
of multipliers turns a sparsity constraint into a penalty trained by ascent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .model import FULL, STREAMING, HeadMode


@dataclass
class GateParams:
    log_alpha: np.ndarray                 # (layers, heads)
    temperature: float = 1.5
    stretch_low: float = -0.1
    stretch_high: float = 1.1
    uniform_eps: float = 1e-6
    lambda1: float = 0.0
    lambda2: float = 0.0
    target: float = 0.0

    def __post_init__(self):
        self.log_alpha = np.asarray(self.log_alpha, dtype=np.float64)
        if self.log_alpha.ndim != 2:
            raise ConfigurationError("log_alpha must be (layers, heads)")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if not (self.stretch_low < 0.0 < 1.0 < self.stretch_high):
            raise ConfigurationError("stretch interval must strictly contain [0,1]")
        if not (0.0 < self.uniform_eps < 1e-3):
            raise ConfigurationError("uniform_eps out of range")
        if not (0.0 <= self.target <= 1.0):
            raise ConfigurationError("target must lie in [0,1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_alpha.shape


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def gate_values_from_uniform(u: np.ndarray, params: GateParams) -> np.ndarray:
    """Deterministic tail of the sampler given the uniform draw u."""
    noise = np.log(u) - np.log1p(-u)
    s = _sigmoid((noise + params.log_alpha) * (1.0 / params.temperature))
    stretched = params.stretch_low + s * (params.stretch_high - params.stretch_low)
    return np.clip(stretched, 0.0, 1.0)


def sample_gates(params: GateParams, rng: np.random.Generator) -> np.ndarray:
    """One stochastic gate value per (layer, head); exact 0/1 have mass."""
    eps = params.uniform_eps
    u = rng.uniform(eps, 1.0 - eps, size=params.shape)
    return gate_values_from_uniform(u, params)


def sample_gates_node(tape: T.Tape, log_alpha: T.Node, params: GateParams,
                      rng: np.random.Generator) -> T.Node:
    """Same draw as `sample_gates` (identical rng consumption), on the tape so
    gradients flow to log_alpha through the reparameterized noise."""
    eps = params.uniform_eps
    u = rng.uniform(eps, 1.0 - eps, size=params.shape)
    noise = tape.const(np.log(u) - np.log1p(-u))
    s = T.sigmoid(T.scale(T.add(noise, log_alpha), 1.0 / params.temperature))
    span = params.stretch_high - params.stretch_low
    stretched = T.add(T.scale(s, span), tape.const(params.stretch_low))
    return T.clamp01(stretched)


def _prob_offset(params: GateParams) -> float:
    return params.temperature * np.log(-params.stretch_low / params.stretch_high)


def prob_active(params: GateParams) -> np.ndarray:
    """P(gate > 0) per head, in closed form."""
    return _sigmoid(params.log_alpha - _prob_offset(params))


def prob_active_node(tape: T.Tape, log_alpha: T.Node, params: GateParams) -> T.Node:
    return T.sigmoid(T.add(log_alpha, tape.const(-_prob_offset(params))))


def expected_sparsity(params: GateParams) -> float:
    return float(1.0 - prob_active(params).mean())


def expected_sparsity_node(tape: T.Tape, log_alpha: T.Node, params: GateParams) -> T.Node:
    p = prob_active_node(tape, log_alpha, params)
    size = params.shape[0] * params.shape[1]
    mean = T.scale(T.sum_all(p), 1.0 / size)
    return T.add(tape.const(1.0), T.scale(mean, -1.0))


def lagrangian_penalty(sparsity: float, params: GateParams) -> float:
    gap = sparsity - params.target
    return params.lambda1 * gap + params.lambda2 * gap * gap


def lagrangian_penalty_node(tape: T.Tape, sparsity: T.Node, lambda1: T.Node,
                            lambda2: T.Node, target: float) -> T.Node:
    gap = T.add(sparsity, tape.const(-target))
    return T.add(T.mul(lambda1, gap), T.mul(lambda2, T.mul(gap, gap)))


@dataclass(frozen=True)
class SparsitySchedule:
    warmup_steps: int
    final_target: float
    total_steps: int

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigurationError("warmup_steps must be >= 1")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        if not (0.0 <= self.final_target <= 1.0):
            raise ConfigurationError("final_target must lie in [0,1]")


def target_at(schedule: SparsitySchedule, step: int) -> float:
    """Linear ramp to the final target over the warmup, flat afterwards."""
    if not (0 <= step <= schedule.total_steps):
        raise ContractError("step outside the schedule")
    return schedule.final_target * min(1.0, step / schedule.warmup_steps)


def discretize(log_alpha: np.ndarray, head_sparsity: float) -> list[list[HeadMode]]:
    """Freeze gates into head modes: the floor(s*L*H) smallest logits become
    STREAMING heads, ties broken toward earlier (layer, head).

    Depends on the logits only through their ordering.
    """
    log_alpha = np.asarray(log_alpha, dtype=np.float64)
    if log_alpha.ndim != 2:
        raise ConfigurationError("log_alpha must be (layers, heads)")
    if not (0.0 <= head_sparsity <= 1.0):
        raise ConfigurationError("head_sparsity must lie in [0,1]")
    layers, heads = log_alpha.shape
    n_stream = int(np.floor(head_sparsity * layers * heads))
    order = sorted(
        ((log_alpha[l, h], l, h) for l in range(layers) for h in range(heads)),
        key=lambda t: (t[0], t[1], t[2]),
    )
    streaming = {(l, h) for _, l, h in order[:n_stream]}
    return [[STREAMING if (l, h) in streaming else FULL for h in range(heads)]
            for l in range(layers)]


def save_gates(path, params: GateParams) -> None:
    layers, heads = params.shape
    blob = {
        "layers": layers,
        "heads": heads,
        "log_alpha": {f"{l},{h}": params.log_alpha[l, h]
                      for l in range(layers) for h in range(heads)},
        "temperature": params.temperature,
        "stretch_low": params.stretch_low,
        "stretch_high": params.stretch_high,
        "uniform_eps": params.uniform_eps,
        "lambda1": params.lambda1,
        "lambda2": params.lambda2,
        "target": params.target,
    }
    with open(path, "w") as f:
        json.dump(blob, f)


def load_gates(path) -> GateParams:
    with open(path) as f:
        blob = json.load(f)
    la = np.zeros((blob["layers"], blob["heads"]))
    for key, val in blob["log_alpha"].items():
        l, h = key.split(",")
        la[int(l), int(h)] = val
    return GateParams(
        log_alpha=la,
        temperature=blob["temperature"],
        stretch_low=blob["stretch_low"],
        stretch_high=blob["stretch_high"],
        uniform_eps=blob["uniform_eps"],
        lambda1=blob["lambda1"],
        lambda2=blob["lambda2"],
        target=blob["target"],
    )


def save_mask_table(path, modes: list[list[HeadMode]]) -> None:
    table = {f"{l},{h}": m.kind.value
             for l, row in enumerate(modes) for h, m in enumerate(row)}
    with open(path, "w") as f:
        json.dump({"layers": len(modes), "heads": len(modes[0]), "modes": table}, f)


def load_mask_table(path) -> list[list[HeadMode]]:
    with open(path) as f:
        blob = json.load(f)
    out = []
    for l in range(blob["layers"]):
        row = []
        for h in range(blob["heads"]):
            row.append(STREAMING if blob["modes"][f"{l},{h}"] == "streaming" else FULL)
        out.append(row)
    return out
