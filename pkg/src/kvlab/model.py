"""Toy decoder-only transformer with grouped-query attention and an explicit,
evictable per-(layer, kv_head) KV cache.

Two forward paths share the same arithmetic:
  * a plain-numpy inference path over the cache (chunked pre-fill, probes,
    greedy decoding), and
  * a tape-based training path (`lm_graph`) over full sequences with causal
    masks, used by the trainer.
Their logit-equivalence is pinned by tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, InvalidMaskError


# --------------------------------------------------------------------------
# configs and head modes


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    vocab_size: int
    max_positions: int
    rope_base: float = 10000.0
    ffn_mult: int = 2

    def __post_init__(self):
        if self.num_query_heads % self.num_kv_heads != 0:
            raise ConfigurationError("num_query_heads must be a multiple of num_kv_heads")
        for name in ("num_layers", "num_query_heads", "num_kv_heads", "head_dim",
                     "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    @property
    def model_dim(self) -> int:
        return self.num_query_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.num_query_heads // self.num_kv_heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.model_dim

    def kv_head_of(self, query_head: int) -> int:
        return query_head // self.group_size


@dataclass(frozen=True)
class StreamingSpec:
    sink_size: int = 4
    window_size: int = 32

    def __post_init__(self):
        if self.sink_size < 0:
            raise ConfigurationError("sink_size must be >= 0")
        if self.window_size < 1:
            raise ConfigurationError("window_size must be >= 1")


class HeadKind(Enum):
    FULL = "full"
    STREAMING = "streaming"
    GATED = "gated"


@dataclass(frozen=True)
class HeadMode:
    kind: HeadKind
    z: Optional[float] = None  # only for GATED (training-time interpolation)

    def __post_init__(self):
        if self.kind is HeadKind.GATED:
            if self.z is None or not (0.0 <= self.z <= 1.0):
                raise ConfigurationError("GATED mode needs z in [0,1]")
        elif self.z is not None:
            raise ConfigurationError("z is only meaningful for GATED heads")


FULL = HeadMode(HeadKind.FULL)
STREAMING = HeadMode(HeadKind.STREAMING)


def full_modes(config: ModelConfig) -> list[list[HeadMode]]:
    return [[FULL] * config.num_query_heads for _ in range(config.num_layers)]


def streaming_modes(config: ModelConfig) -> list[list[HeadMode]]:
    return [[STREAMING] * config.num_query_heads for _ in range(config.num_layers)]


def streaming_allowed(query_pos: int, key_pos: int, spec: StreamingSpec) -> bool:
    """Sink-or-window rule. The window always includes the query itself."""
    if key_pos > query_pos:
        raise ContractError("streaming_allowed requires key_pos <= query_pos")
    return key_pos < spec.sink_size or (query_pos - key_pos) < spec.window_size


def fully_streaming_groups(config: ModelConfig, head_modes) -> list[tuple[int, int]]:
    """(layer, kv_head) pairs whose entire query group is STREAMING.

    Only such groups may physically evict by recency: any FULL head in the
    group still needs the shared entries.
    """
    out = []
    gs = config.group_size
    for layer in range(config.num_layers):
        for g in range(config.num_kv_heads):
            heads = head_modes[layer][g * gs:(g + 1) * gs]
            if all(m.kind is HeadKind.STREAMING for m in heads):
                out.append((layer, g))
    return out


# --------------------------------------------------------------------------
# KV cache


@dataclass
class KVEntry:
    position: int
    key: np.ndarray
    value: np.ndarray
    entry_id: int


class KVCache:
    """Ordered per-(layer, kv_head) entry lists; evicted entries are removed."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.entries: list[list[list[KVEntry]]] = [
            [[] for _ in range(config.num_kv_heads)] for _ in range(config.num_layers)
        ]
        self._next_id = 0
        self._max_position = -1

    def append(self, layer: int, kv_head: int, position: int,
               key: np.ndarray, value: np.ndarray) -> int:
        row = self.entries[layer][kv_head]
        if row and row[-1].position >= position:
            raise ContractError(
                f"positions must increase within a head: {position} after {row[-1].position}"
            )
        entry = KVEntry(position, key, value, self._next_id)
        row.append(entry)
        self._next_id += 1
        self._max_position = max(self._max_position, position)
        return entry.entry_id

    def evict(self, layer: int, kv_head: int, entry_ids) -> list[KVEntry]:
        doomed = set(entry_ids)
        if not doomed:
            return []
        row = self.entries[layer][kv_head]
        removed = [e for e in row if e.entry_id in doomed]
        if len(removed) != len(doomed):
            raise ContractError("eviction of an entry id not resident in this head")
        self.entries[layer][kv_head] = [e for e in row if e.entry_id not in doomed]
        return removed

    def max_position(self) -> int:
        """-1 when empty."""
        return self._max_position

    def size(self, layer: int, kv_head: int) -> int:
        return len(self.entries[layer][kv_head])

    def resident_counts(self) -> np.ndarray:
        c = self.config
        return np.array(
            [[len(self.entries[l][g]) for g in range(c.num_kv_heads)]
             for l in range(c.num_layers)],
            dtype=np.int64,
        )

    def entry_ids(self, layer: int, kv_head: int) -> list[int]:
        return [e.entry_id for e in self.entries[layer][kv_head]]


# --------------------------------------------------------------------------
# weights


def init_weights(config: ModelConfig, rng: np.random.Generator, scale: float = 0.02) -> dict:
    d, f, v = config.model_dim, config.ffn_dim, config.vocab_size
    kv_dim = config.num_kv_heads * config.head_dim
    w = {
        "embed": rng.normal(0.0, scale, size=(v, d)),
        "unembed": rng.normal(0.0, scale, size=(d, v)),
        "final_gain": np.ones(d),
    }
    for i in range(config.num_layers):
        w[f"layer{i}.wq"] = rng.normal(0.0, scale, size=(d, d))
        w[f"layer{i}.wk"] = rng.normal(0.0, scale, size=(d, kv_dim))
        w[f"layer{i}.wv"] = rng.normal(0.0, scale, size=(d, kv_dim))
        w[f"layer{i}.wo"] = rng.normal(0.0, scale, size=(d, d))
        w[f"layer{i}.attn_gain"] = np.ones(d)
        w[f"layer{i}.mlp_gain"] = np.ones(d)
        w[f"layer{i}.w_up"] = rng.normal(0.0, scale, size=(d, f))
        w[f"layer{i}.w_down"] = rng.normal(0.0, scale, size=(f, d))
    return w


def save_checkpoint(path, config: ModelConfig, weights: dict) -> None:
    blob = {
        "config": asdict(config),
        "manifest": {k: list(v.shape) for k, v in weights.items()},
        "arrays": {k: v.reshape(-1).tolist() for k, v in weights.items()},
    }
    with open(path, "w") as f:
        json.dump(blob, f)


def load_checkpoint(path) -> tuple[ModelConfig, dict]:
    with open(path) as f:
        blob = json.load(f)
    config = ModelConfig(**blob["config"])
    weights = {}
    for k, shape in blob["manifest"].items():
        weights[k] = np.array(blob["arrays"][k], dtype=np.float64).reshape(shape)
    return config, weights


# --------------------------------------------------------------------------
# rotary positions (half-split convention, absolute positions)


def rope_tables(positions, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    positions = np.asarray(positions, dtype=np.float64)
    half = head_dim // 2
    freqs = base ** (-np.arange(half) * 2.0 / head_dim)
    angles = positions[:, None] * freqs[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)
    return cos, sin


def rotate_half_matrix(head_dim: int) -> np.ndarray:
    # constant linear map x -> [-x2, x1]; lets the taped path rotate via matmul
    half = head_dim // 2
    R = np.zeros((head_dim, head_dim))
    for j in range(half):
        R[j + half, j] = -1.0
        R[j, j + half] = 1.0
    return R


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """x: (..., T, d); cos/sin: (T, d)."""
    half = x.shape[-1] // 2
    rotated = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return x * cos + rotated * sin


# --------------------------------------------------------------------------
# numpy attention helpers


def _np_sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _np_rms(x, eps: float = 1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def masked_softmax(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis; forbidden positions exactly 0."""
    if not allowed.any(axis=-1).all():
        raise InvalidMaskError("attention row with no visible key")
    shifted = np.where(allowed, scores, -np.inf)
    m = shifted.max(axis=-1, keepdims=True)
    z = np.where(allowed, np.exp(shifted - m), 0.0)
    return z / z.sum(axis=-1, keepdims=True)


def streaming_allowed_grid(query_positions, key_positions, spec: StreamingSpec) -> np.ndarray:
    q = np.asarray(query_positions)[:, None]
    k = np.asarray(key_positions)[None, :]
    return (k <= q) & ((k < spec.sink_size) | ((q - k) < spec.window_size))


def causal_allowed_grid(query_positions, key_positions) -> np.ndarray:
    q = np.asarray(query_positions)[:, None]
    k = np.asarray(key_positions)[None, :]
    return k <= q


def hybrid_attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray, z: float,
                  spec: StreamingSpec, query_positions=None, key_positions=None) -> np.ndarray:
    """z * full-causal attention + (1-z) * streaming attention, same scores.

    Positions default to keys at 0..S-1 with queries aligned to the final Tq
    positions. Exactly affine in z by construction.
    """
    if keys.shape[0] == 0:
        raise ContractError("hybrid_attend with an empty KV set")
    if not (0.0 <= z <= 1.0):
        raise ContractError("z must lie in [0,1]")
    tq, s = q.shape[0], keys.shape[0]
    if key_positions is None:
        key_positions = np.arange(s)
    if query_positions is None:
        query_positions = np.arange(s - tq, s)
    scores = (q @ keys.T) / np.sqrt(q.shape[-1])
    full = masked_softmax(scores, causal_allowed_grid(query_positions, key_positions))
    stream = masked_softmax(scores, streaming_allowed_grid(query_positions, key_positions, spec))
    return z * (full @ values) + (1.0 - z) * (stream @ values)


# --------------------------------------------------------------------------
# inference forward over the cache


@dataclass
class AttnRecord:
    """Post-softmax attention of one (layer, query_head) over its key columns."""
    entry_ids: np.ndarray    # -1 marks uncommitted probe keys
    key_positions: np.ndarray
    probs: np.ndarray        # (num_queries, num_keys)


@dataclass
class ChunkResult:
    logits: np.ndarray
    records: Optional[list[list[AttnRecord]]]
    active_counts: np.ndarray                      # (L, G) resident entries attended
    created: list[tuple[int, int, int, int]]       # (entry_id, layer, kv_head, position)


def _check_positions(cache: KVCache, positions: np.ndarray, config: ModelConfig):
    if len(positions) == 0:
        return
    if np.any(np.diff(positions) <= 0):
        raise ContractError("positions must be strictly increasing")
    if positions[0] <= cache.max_position():
        raise ContractError(
            f"position {positions[0]} collides with cached max {cache.max_position()}"
        )
    if positions[-1] >= config.max_positions:
        raise ContractError("position beyond max_positions")


def _forward(config: ModelConfig, weights: dict, cache: KVCache, tokens, positions,
             head_modes, spec: StreamingSpec, commit: bool, record: bool):
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    _check_positions(cache, positions, config)
    n_new = len(tokens)
    L, H, G = config.num_layers, config.num_query_heads, config.num_kv_heads
    gs, hd = config.group_size, config.head_dim
    for layer in range(L):
        for h, mode in enumerate(head_modes[layer]):
            if mode.kind is HeadKind.GATED:
                raise ContractError("GATED heads are training-only; inference takes FULL/STREAMING")

    cos, sin = rope_tables(positions, hd, config.rope_base)
    x = weights["embed"][tokens]
    records: list[list[AttnRecord]] = [[None] * H for _ in range(L)] if record else None
    active = np.zeros((L, G), dtype=np.int64)
    created: list[tuple[int, int, int, int]] = []

    for layer in range(L):
        h_in = _np_rms(x) * weights[f"layer{layer}.attn_gain"]
        q = (h_in @ weights[f"layer{layer}.wq"]).reshape(n_new, H, hd).transpose(1, 0, 2)
        k = (h_in @ weights[f"layer{layer}.wk"]).reshape(n_new, G, hd).transpose(1, 0, 2)
        v = (h_in @ weights[f"layer{layer}.wv"]).reshape(n_new, G, hd).transpose(1, 0, 2)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)

        out = np.empty((H, n_new, hd))
        for g in range(G):
            resident = cache.entries[layer][g]
            if commit:
                for t in range(n_new):
                    eid = cache.append(layer, g, int(positions[t]), k[g, t].copy(), v[g, t].copy())
                    created.append((eid, layer, g, int(positions[t])))
                resident = cache.entries[layer][g]
                keys_g = np.stack([e.key for e in resident])
                vals_g = np.stack([e.value for e in resident])
                kpos = np.array([e.position for e in resident])
                ids = np.array([e.entry_id for e in resident])
                n_resident_cols = len(resident)
            else:
                blocks_k = [e.key for e in resident] + [k[g, t] for t in range(n_new)]
                blocks_v = [e.value for e in resident] + [v[g, t] for t in range(n_new)]
                keys_g = np.stack(blocks_k)
                vals_g = np.stack(blocks_v)
                kpos = np.array([e.position for e in resident] + list(positions))
                ids = np.array([e.entry_id for e in resident] + [-1] * n_new)
                n_resident_cols = len(resident)

            q_g = q[g * gs:(g + 1) * gs]
            scores = np.matmul(q_g, keys_g.T) / np.sqrt(hd)
            causal = causal_allowed_grid(positions, kpos)
            stream = None
            allowed = np.empty((gs, n_new, len(kpos)), dtype=bool)
            for j in range(gs):
                mode = head_modes[layer][g * gs + j]
                if mode.kind is HeadKind.FULL:
                    allowed[j] = causal
                else:
                    if stream is None:
                        stream = streaming_allowed_grid(positions, kpos, spec)
                    allowed[j] = stream
            probs = masked_softmax(scores, allowed)
            out[g * gs:(g + 1) * gs] = np.matmul(probs, vals_g)
            if record:
                for j in range(gs):
                    records[layer][g * gs + j] = AttnRecord(ids.copy(), kpos.copy(), probs[j])
            attended = allowed.any(axis=(0, 1))
            active[layer, g] = int(attended[:n_resident_cols].sum())

        x = x + out.transpose(1, 0, 2).reshape(n_new, H * hd) @ weights[f"layer{layer}.wo"]
        h2 = _np_rms(x) * weights[f"layer{layer}.mlp_gain"]
        u = h2 @ weights[f"layer{layer}.w_up"]
        x = x + (u * _np_sigmoid(u)) @ weights[f"layer{layer}.w_down"]

    hfin = _np_rms(x) * weights["final_gain"]
    logits = hfin @ weights["unembed"]
    return ChunkResult(logits, records, active, created)


def forward_chunk(config: ModelConfig, weights: dict, cache: KVCache, tokens, positions,
                  head_modes, record_attention: bool = False,
                  spec: StreamingSpec = StreamingSpec()) -> ChunkResult:
    """Process one chunk, committing its KV entries to the cache."""
    return _forward(config, weights, cache, tokens, positions, head_modes, spec,
                    commit=True, record=record_attention)


def probe_forward(config: ModelConfig, weights: dict, cache: KVCache, probe_tokens,
                  probe_positions, head_modes,
                  spec: StreamingSpec = StreamingSpec()) -> list[list[AttnRecord]]:
    """Attention of probe queries over resident + probe keys; commits nothing.

    Probe key columns are marked with entry_id -1 in the records.
    """
    probe_positions = np.asarray(probe_positions, dtype=np.int64)
    if len(probe_positions) == 0:
        return [[AttnRecord(np.empty(0, dtype=int), np.empty(0, dtype=int),
                            np.empty((0, 0)))] * config.num_query_heads
                for _ in range(config.num_layers)]
    if probe_positions.min() <= cache.max_position():
        raise ContractError("probe positions must exceed every cached position")
    before = [cache.entry_ids(l, g) for l in range(config.num_layers)
              for g in range(config.num_kv_heads)]
    res = _forward(config, weights, cache, probe_tokens, probe_positions, head_modes, spec,
                   commit=False, record=True)
    after = [cache.entry_ids(l, g) for l in range(config.num_layers)
             for g in range(config.num_kv_heads)]
    assert before == after  # contract: cache untouched
    return res.records


def decode_greedy(config: ModelConfig, weights: dict, cache: KVCache, head_modes,
                  policy_hook: Optional[Callable], num_steps: int, last_logits: np.ndarray,
                  spec: StreamingSpec = StreamingSpec(), ledger=None) -> np.ndarray:
    """Greedy continuation. `last_logits` are the logits of the final pre-filled
    position (chunked_prefill returns them).

    After each step: streaming-uniform groups evict outside sink+window, then
    `policy_hook(cache, step, position)` may evict more; it must return the
    [(entry_id, layer, kv_head, position)] list of what it removed.
    """
    out = []
    s_groups = fully_streaming_groups(config, head_modes)
    logits = last_logits
    for step in range(num_steps):
        token = int(np.argmax(logits))
        out.append(token)
        position = cache.max_position() + 1
        res = forward_chunk(config, weights, cache, [token], [position], head_modes,
                            record_attention=False, spec=spec)
        if ledger is not None:
            ledger.record_step("decode", position, position + 1, res.active_counts,
                               res.created)
        evicted = streaming_evict(cache, spec, position + 1, s_groups)
        if policy_hook is not None:
            evicted += policy_hook(cache, step, position)
        if ledger is not None and evicted:
            ledger.record_evictions(evicted)
        logits = res.logits[-1]
    return np.array(out, dtype=np.int64)


def streaming_evict(cache: KVCache, spec: StreamingSpec, next_position: int,
                    groups: Sequence[tuple[int, int]]) -> list[tuple[int, int, int, int]]:
    """Drop entries no future query of a streaming head can see.

    An entry at position p survives iff p < sink or next_position - p < window.
    """
    evicted = []
    for layer, g in groups:
        doomed = [e for e in cache.entries[layer][g]
                  if e.position >= spec.sink_size
                  and next_position - e.position >= spec.window_size]
        if doomed:
            cache.evict(layer, g, [e.entry_id for e in doomed])
            evicted.extend((e.entry_id, layer, g, e.position) for e in doomed)
    return evicted


# --------------------------------------------------------------------------
# taped training graph


def weight_nodes(tape: T.Tape, weights: dict, trainable: bool) -> dict:
    return {k: tape.leaf(v, trainable=trainable) for k, v in weights.items()}


def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def streaming_mask(n: int, spec: StreamingSpec) -> np.ndarray:
    allowed = streaming_allowed_grid(np.arange(n), np.arange(n), spec)
    m = np.where(allowed, 0.0, -np.inf)
    return m


def lm_graph(tape: T.Tape, config: ModelConfig, wnodes: dict, tokens,
             z: Optional[T.Node] = None,
             spec: StreamingSpec = StreamingSpec()) -> tuple[T.Node, T.Node]:
    """Full-sequence training forward.

    z is an optional (L, H) node of per-head gate values; when given, every
    head output is z*full + (1-z)*streaming (two softmaxes over shared
    scores). Returns (logits, final hidden states before the output
    projection).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    L, H, G = config.num_layers, config.num_query_heads, config.num_kv_heads
    gs, hd = config.group_size, config.head_dim
    cos_np, sin_np = rope_tables(np.arange(n), hd, config.rope_base)
    cos, sin = tape.const(cos_np), tape.const(sin_np)
    rot = tape.const(rotate_half_matrix(hd))
    m_full = tape.const(causal_mask(n))
    m_stream = tape.const(streaming_mask(n, spec)) if z is not None else None
    one = tape.const(1.0)
    expand = np.repeat(np.arange(G), gs)
    inv_sqrt_d = 1.0 / np.sqrt(hd)

    def rope(node):
        return T.add(T.mul(node, cos), T.mul(T.matmul(node, rot), sin))

    x = T.embedding_lookup(wnodes["embed"], tokens)
    for layer in range(L):
        h = T.mul(T.rms_normalize(x), wnodes[f"layer{layer}.attn_gain"])
        q = T.transpose_axes(T.reshape(T.matmul(h, wnodes[f"layer{layer}.wq"]), (n, H, hd)), (1, 0, 2))
        k = T.transpose_axes(T.reshape(T.matmul(h, wnodes[f"layer{layer}.wk"]), (n, G, hd)), (1, 0, 2))
        v = T.transpose_axes(T.reshape(T.matmul(h, wnodes[f"layer{layer}.wv"]), (n, G, hd)), (1, 0, 2))
        q, k = rope(q), rope(k)
        k_exp = T.gather_rows(k, expand)
        v_exp = T.gather_rows(v, expand)
        # scale q rather than the much larger score matrix
        scores = T.matmul(T.scale(q, inv_sqrt_d), T.transpose_last2(k_exp))
        p_full = T.row_softmax_with_additive_mask(scores, m_full)
        o_full = T.matmul(p_full, v_exp)
        if z is None:
            merged = T.reshape(T.transpose_axes(o_full, (1, 0, 2)), (n, H * hd))
        else:
            p_stream = T.row_softmax_with_additive_mask(scores, m_stream)
            o_stream = T.matmul(p_stream, v_exp)
            z_layer = T.reshape(T.gather_rows(z, np.array([layer])), (H,))
            one_minus = T.add(T.scale(z_layer, -1.0), one)
            # head axis last so per-head gates ride the suffix-broadcast rule
            tf = T.transpose_axes(o_full, (1, 2, 0))
            ts = T.transpose_axes(o_stream, (1, 2, 0))
            comb = T.add(T.mul(tf, z_layer), T.mul(ts, one_minus))
            merged = T.reshape(T.transpose_axes(comb, (0, 2, 1)), (n, H * hd))
        x = T.add(x, T.matmul(merged, wnodes[f"layer{layer}.wo"]))
        h2 = T.mul(T.rms_normalize(x), wnodes[f"layer{layer}.mlp_gain"])
        u = T.matmul(h2, wnodes[f"layer{layer}.w_up"])
        x = T.add(x, T.matmul(T.mul(u, T.sigmoid(u)), wnodes[f"layer{layer}.w_down"]))

    hfin = T.mul(T.rms_normalize(x), wnodes["final_gain"])
    logits = T.matmul(hfin, wnodes["unembed"])
    return logits, hfin
