"""KV eviction policies driven by chunked pre-fill.

Scoring assigns each resident cache entry an importance; selection keeps a
per-layer budget of top entries (a recent tail is always protected); the
driver interleaves chunk forwards, scoring, and physical eviction, recording
every create/evict into a ledger when one is supplied.

Attention-based scores can observe either the chunk's own trailing queries
(cheap, but early chunks never see the real end of the prompt) or a probe
forward from the prompt's true final positions (the patched variant).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError
from .ledger import KVLedger
from .model import (
    KVCache,
    ModelConfig,
    StreamingSpec,
    forward_chunk,
    full_modes,
    fully_streaming_groups,
    probe_forward,
    streaming_evict,
)

METHODS = ("snap", "pyramid", "l2key", "none")


@dataclass(frozen=True)
class EvictionPolicy:
    method: str
    retention_fraction: float = 1.0
    observation_window: int = 16
    smoothing_kernel: int = 7
    patched: bool = False
    group_pooled: bool = True
    protected_tail: Optional[int] = None   # default: the observation window
    pyramid_ratio: float = 8.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        if not (0.0 < self.retention_fraction <= 1.0):
            raise ConfigurationError("retention_fraction must lie in (0,1]")
        if self.observation_window < 1:
            raise ConfigurationError("observation_window must be >= 1")
        if self.smoothing_kernel < 1 or self.smoothing_kernel % 2 == 0:
            raise ConfigurationError("smoothing_kernel must be odd and >= 1")
        if self.protected_tail is not None and self.protected_tail < 0:
            raise ConfigurationError("protected_tail must be >= 0")
        if self.pyramid_ratio < 1.0:
            raise ConfigurationError("pyramid_ratio must be >= 1")

    @property
    def tail(self) -> int:
        return self.observation_window if self.protected_tail is None else self.protected_tail


# --------------------------------------------------------------------------
# scoring


def smooth_scores(raw: np.ndarray, kernel: int) -> np.ndarray:
    """Centered moving sum over `kernel` slots divided by the full kernel
    width; windows truncate at the edges but the divisor does not."""
    if kernel % 2 == 0 or kernel < 1:
        raise ConfigurationError("kernel must be odd and >= 1")
    if kernel == 1:
        return raw.astype(np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    window = np.ones(kernel)
    if raw.ndim == 1:
        return np.convolve(raw, window, mode="same") / kernel
    return np.stack([np.convolve(row, window, mode="same") for row in raw]) / kernel


def score_attention(prob_rows_by_head: Sequence[np.ndarray], kernel: int,
                    group_pooled: bool) -> np.ndarray:
    """Importance per key column from observed attention rows.

    Each head contributes the column sums of its observation rows, smoothed
    over neighboring positions. Pooled mode averages the per-head scores
    across the group; otherwise the per-head matrix comes back as (heads, S).
    """
    if not prob_rows_by_head:
        raise ContractError("need at least one head of attention rows")
    width = prob_rows_by_head[0].shape[1]
    per_head = []
    for rows in prob_rows_by_head:
        if rows.shape[1] != width:
            raise ContractError("attention rows must share the key column set")
        per_head.append(smooth_scores(rows.sum(axis=0), kernel))
    stacked = np.stack(per_head)
    return stacked.mean(axis=0) if group_pooled else stacked


def score_l2_keys(keys: np.ndarray) -> np.ndarray:
    """Smaller key norms rank as more important (higher score)."""
    return -np.linalg.norm(np.asarray(keys, dtype=np.float64), axis=-1)


# --------------------------------------------------------------------------
# budgets and selection


def allocate_budgets(method: str, total_keep: int, num_layers: int,
                     pyramid_ratio: float = 8.0) -> list[int]:
    """Split a total per-head keep budget across layers.

    Every method splits evenly except "pyramid", which ramps linearly from
    `pyramid_ratio` times the last layer's share down to it. Budgets are
    integers summing to total_keep, each at least 1.
    """
    if method not in METHODS:
        raise ConfigurationError(f"method must be one of {METHODS}")
    if total_keep < num_layers:
        raise ContractError("total_keep must provide at least one slot per layer")
    if method != "pyramid":
        base, rem = divmod(total_keep, num_layers)
        return [base + (1 if l < rem else 0) for l in range(num_layers)]
    if num_layers == 1:
        return [total_keep]
    weights = [pyramid_ratio - (pyramid_ratio - 1.0) * l / (num_layers - 1)
               for l in range(num_layers)]
    shares = [total_keep * w / sum(weights) for w in weights]
    floors = [int(np.floor(s)) for s in shares]
    leftovers = total_keep - sum(floors)
    order = sorted(range(num_layers), key=lambda l: (-(shares[l] - floors[l]), l))
    for l in order[:leftovers]:
        floors[l] += 1
    # a steep ratio on a tiny budget can starve late layers; backfill from the top
    for l in range(num_layers):
        while floors[l] < 1:
            donor = int(np.argmax(floors))
            floors[donor] -= 1
            floors[l] += 1
    return floors


def _keep_set(scores: np.ndarray, positions: np.ndarray, keep_budget: int,
              protected: frozenset) -> set[int]:
    """Indices kept by one scorer: protected first, then by score with ties
    resolved toward the more recent position."""
    idx = range(len(scores))
    prot = [i for i in idx if positions[i] in protected]
    if len(prot) > keep_budget:
        raise ContractError("protected positions exceed the keep budget")
    rest = [i for i in idx if positions[i] not in protected]
    rest.sort(key=lambda i: (-scores[i], -positions[i]))
    return set(prot) | set(rest[:keep_budget - len(prot)])


def select_evictions(scores: np.ndarray, positions: np.ndarray, entry_ids: np.ndarray,
                     keep_budget: int, protected_positions: Sequence[int] = ()) -> list[int]:
    """Entry ids to evict so that `keep_budget` entries remain. A budget at or
    above the resident count is a no-op."""
    scores = np.asarray(scores, dtype=np.float64)
    positions = np.asarray(positions)
    entry_ids = np.asarray(entry_ids)
    if not (len(scores) == len(positions) == len(entry_ids)):
        raise ContractError("scores, positions and entry ids must align")
    if keep_budget < 0:
        raise ContractError("keep_budget must be >= 0")
    if keep_budget >= len(scores):
        return []
    keep = _keep_set(scores, positions, keep_budget, frozenset(protected_positions))
    return sorted(int(entry_ids[i]) for i in range(len(scores)) if i not in keep)


def select_evictions_union(per_head_scores: np.ndarray, positions: np.ndarray,
                           entry_ids: np.ndarray, keep_budget: int,
                           protected_positions: Sequence[int] = ()) -> list[int]:
    """Ungrouped selection: every query head keeps its own top set and the
    group retains the union, so disjoint preferences multiply retention."""
    per_head_scores = np.asarray(per_head_scores, dtype=np.float64)
    if per_head_scores.ndim != 2:
        raise ContractError("per_head_scores must be (heads, columns)")
    if keep_budget >= per_head_scores.shape[1]:
        return []
    protected = frozenset(protected_positions)
    keep: set[int] = set()
    for scores in per_head_scores:
        keep |= _keep_set(scores, positions, keep_budget, protected)
    return sorted(int(entry_ids[i]) for i in range(per_head_scores.shape[1])
                  if i not in keep)


# --------------------------------------------------------------------------
# chunked pre-fill driver


@dataclass
class PrefillResult:
    cache: KVCache
    logits: np.ndarray       # (prompt_len, vocab) next-token logits per position
    last_logits: np.ndarray


def _observation_rows(config, weights, cache, prompt, chunk_start, chunk_end,
                      chunk_records, policy, head_modes, spec):
    """Per-(layer, qhead) observation matrices aligned to the group's current
    resident columns. Returns records as {(layer, head): (n_obs, S) array}."""
    n = len(prompt)
    k = policy.observation_window
    chunk_positions = np.arange(chunk_start, chunk_end)
    rows: dict[tuple[int, int], np.ndarray] = {}

    def chunk_rows_from(selector):
        out = {}
        for layer in range(config.num_layers):
            for h in range(config.num_query_heads):
                rec = chunk_records[layer][h]
                out[(layer, h)] = rec.probs[selector]
        return out

    if policy.patched and chunk_end < n:
        probe_start = max(chunk_end, n - k)
        probe = probe_forward(config, weights, cache, prompt[probe_start:n],
                              np.arange(probe_start, n), head_modes, spec=spec)
        own = chunk_positions >= n - k   # this chunk's share of the final window
        for layer in range(config.num_layers):
            for h in range(config.num_query_heads):
                rec = probe[layer][h]
                resident_cols = rec.entry_ids >= 0
                parts = [rec.probs[:, resident_cols]]
                if own.any():
                    parts.append(chunk_records[layer][h].probs[own])
                rows[(layer, h)] = np.concatenate(parts, axis=0)
        return rows

    take = min(k, chunk_end - chunk_start)
    return chunk_rows_from(slice(chunk_end - chunk_start - take, None))


def chunked_prefill(config: ModelConfig, weights: dict, prompt, chunk_size: int,
                    policy: EvictionPolicy, head_modes=None,
                    spec: StreamingSpec = StreamingSpec(),
                    ledger: Optional[KVLedger] = None) -> PrefillResult:
    """Pre-fill `prompt` in fixed-size chunks, evicting after every chunk.

    After each chunk: scores are computed over the resident entries, each
    (layer, kv_head) keeps its layer budget (recent tail always protected),
    then fully-streaming groups additionally drop entries outside sink+window.
    Ledger steps snapshot residency after appends, before these evictions.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    n = len(prompt)
    if n < 1:
        raise ContractError("prompt must be non-empty")
    if chunk_size < 1:
        raise ContractError("chunk_size must be >= 1")
    if head_modes is None:
        head_modes = full_modes(config)
    need_attn = policy.method in ("snap", "pyramid")
    evicting = policy.method != "none" and policy.retention_fraction < 1.0
    s_groups = fully_streaming_groups(config, head_modes)
    gs = config.group_size
    cache = KVCache(config)
    all_logits = []

    for start in range(0, n, chunk_size):
        end = min(start + chunk_size, n)
        res = forward_chunk(config, weights, cache, prompt[start:end],
                            np.arange(start, end), head_modes,
                            record_attention=need_attn and evicting, spec=spec)
        all_logits.append(res.logits)
        if ledger is not None:
            ledger.record_step("prefill_chunk", start, end, res.active_counts,
                               res.created)
        evicted: list[tuple[int, int, int, int]] = []
        if evicting:
            obs = _observation_rows(config, weights, cache, prompt, start, end,
                                    res.records, policy, head_modes, spec) \
                if need_attn else None
            counts = cache.resident_counts()
            per_layer = counts.max(axis=1)
            total_keep = max(config.num_layers,
                             int(np.floor(policy.retention_fraction * per_layer.sum())))
            budgets = allocate_budgets(policy.method, total_keep, config.num_layers,
                                       policy.pyramid_ratio)
            for layer in range(config.num_layers):
                for g in range(config.num_kv_heads):
                    entries = cache.entries[layer][g]
                    if len(entries) <= budgets[layer]:
                        continue
                    positions = np.array([e.position for e in entries])
                    ids = np.array([e.entry_id for e in entries])
                    budget = budgets[layer]
                    tail = min(policy.tail, budget)
                    protected = positions[-tail:] if tail else ()  # cache order is by position
                    if need_attn:
                        heads = range(g * gs, (g + 1) * gs)
                        stacks = [obs[(layer, h)] for h in heads]
                        if policy.group_pooled:
                            scores = score_attention(stacks, policy.smoothing_kernel, True)
                            doomed = select_evictions(scores, positions, ids, budget,
                                                      protected)
                        else:
                            scores = score_attention(stacks, policy.smoothing_kernel, False)
                            doomed = select_evictions_union(scores, positions, ids,
                                                            budget, protected)
                    else:   # l2key
                        keys = np.stack([e.key for e in entries])
                        doomed = select_evictions(score_l2_keys(keys), positions, ids,
                                                  budget, protected)
                    if doomed:
                        removed = cache.evict(layer, g, doomed)
                        evicted.extend((e.entry_id, layer, g, e.position)
                                       for e in removed)
        evicted.extend(streaming_evict(cache, spec, end, s_groups))
        if ledger is not None and evicted:
            ledger.record_evictions(evicted)

    logits = np.concatenate(all_logits)
    return PrefillResult(cache, logits, logits[-1])
