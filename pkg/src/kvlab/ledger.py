"""Exact KV residency accounting.

A ledger watches one prompt's processing: each forward step (pre-fill chunk or
single decoded token) closes with a snapshot of per-(layer, kv_head) resident
entry counts, taken after that step's appends and before any evictions that
follow it. From the step series it derives a normalized footprint: the cost of
the run relative to keeping every entry resident the whole time.

The same numbers must be recoverable from the emitted event log alone;
`replay_check` does that reconstruction independently of the live counters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, IntegrityError


@dataclass(frozen=True)
class StepRecord:
    kind: str                   # "prefill_chunk" | "decode"
    query_start: int
    query_end: int              # exclusive; query count == end - start
    resident: np.ndarray        # (layers, kv_heads) counts at step end, pre-eviction
    active: np.ndarray          # (layers, kv_heads) entries attended this step


@dataclass(frozen=True)
class FootprintReport:
    footprint: float
    peak_kv: float
    steps: tuple[tuple[int, float], ...]   # (query count, mean resident) per step


_STEP_KINDS = ("prefill_chunk", "decode")


class KVLedger:
    def __init__(self, layers: int, kv_heads: int):
        if layers < 1 or kv_heads < 1:
            raise ContractError("ledger needs at least one layer and kv head")
        self.layers = layers
        self.kv_heads = kv_heads
        self.steps: list[StepRecord] = []
        self._resident = np.zeros((layers, kv_heads), dtype=np.int64)
        self._created: dict[int, tuple[int, int, int]] = {}   # id -> (layer, head, position)
        self._evicted: set[int] = set()
        self._create_events: list[dict] = []
        self._evict_events: list[dict] = []

    # -- recording ----------------------------------------------------------

    def record_step(self, kind: str, query_start: int, query_end: int,
                    active: np.ndarray,
                    created: Sequence[tuple[int, int, int, int]]) -> int:
        """Close one step. `created` lists (entry_id, layer, kv_head, position)
        appended during the step; the resident snapshot includes them."""
        if kind not in _STEP_KINDS:
            raise ContractError(f"unknown step kind {kind!r}")
        if query_end <= query_start:
            raise ContractError("step must cover at least one query position")
        step = len(self.steps)
        for entry_id, layer, head, position in created:
            if entry_id in self._created:
                raise IntegrityError(f"entry id {entry_id} created twice")
            self._created[entry_id] = (layer, head, position)
            self._resident[layer, head] += 1
            self._create_events.append({
                "step": step, "kind": kind, "layer": int(layer), "head": int(head),
                "event": "create", "entry_id": int(entry_id), "position": int(position),
            })
        active = np.asarray(active, dtype=np.int64)
        if active.shape != (self.layers, self.kv_heads):
            raise ContractError("active counts must be (layers, kv_heads)")
        if np.any(active > self._resident):
            raise IntegrityError("more entries attended than resident")
        self.steps.append(StepRecord(kind, int(query_start), int(query_end),
                                     self._resident.copy(), active))
        return step

    def record_evictions(self, evicted: Sequence[tuple[int, int, int, int]]) -> None:
        """Entries removed after the most recently closed step."""
        if not self.steps:
            raise ContractError("evictions must follow at least one step")
        step = len(self.steps) - 1
        kind = self.steps[step].kind
        for entry_id, layer, head, position in evicted:
            if entry_id not in self._created:
                raise IntegrityError(f"eviction of unknown entry id {entry_id}")
            if entry_id in self._evicted:
                raise IntegrityError(f"entry id {entry_id} evicted twice")
            if self._created[entry_id] != (layer, head, position):
                raise IntegrityError(f"eviction metadata mismatch for id {entry_id}")
            self._evicted.add(entry_id)
            self._resident[layer, head] -= 1
            if self._resident[layer, head] < 0:
                raise IntegrityError("resident count went negative")
            self._evict_events.append({
                "step": step, "kind": kind, "layer": int(layer), "head": int(head),
                "event": "evict", "entry_id": int(entry_id), "position": int(position),
            })

    def resident_counts(self) -> np.ndarray:
        return self._resident.copy()

    # -- reporting ----------------------------------------------------------

    def _check_complete(self, prompt_len: int, decode_len: int) -> None:
        prefill = [s for s in self.steps if s.kind == "prefill_chunk"]
        decode = [s for s in self.steps if s.kind == "decode"]
        cursor = 0
        for s in prefill:
            if s.query_start != cursor:
                raise ContractError("pre-fill chunks must tile the prompt in order")
            cursor = s.query_end
        if cursor != prompt_len:
            raise ContractError(f"pre-fill covers {cursor} of {prompt_len} prompt positions")
        if len(decode) != decode_len:
            raise ContractError(f"{len(decode)} decode steps recorded, expected {decode_len}")
        for s in decode:
            if s.query_end - s.query_start != 1:
                raise ContractError("decode steps carry exactly one query")

    def report(self, prompt_len: int, decode_len: int) -> FootprintReport:
        self._check_complete(prompt_len, decode_len)
        return _report_from_series(
            [(s.query_end - s.query_start, float(np.mean(s.resident))) for s in self.steps],
            prompt_len, decode_len,
        )

    # -- event log ----------------------------------------------------------

    def to_event_log(self, prompt_len: int, decode_len: int) -> str:
        """Line-delimited JSON: one meta line, then step and event lines in
        step order (creations before the evictions that follow the step)."""
        self._check_complete(prompt_len, decode_len)
        lines = [json.dumps({
            "meta": True, "layers": self.layers, "kv_heads": self.kv_heads,
            "prompt_len": prompt_len, "decode_len": decode_len,
        })]
        creates = {}
        for ev in self._create_events:
            creates.setdefault(ev["step"], []).append(ev)
        evicts = {}
        for ev in self._evict_events:
            evicts.setdefault(ev["step"], []).append(ev)
        for i, s in enumerate(self.steps):
            lines.append(json.dumps({
                "step": i, "kind": s.kind, "q0": s.query_start, "q1": s.query_end,
            }))
            for ev in creates.get(i, ()):
                lines.append(json.dumps(ev))
            for ev in evicts.get(i, ()):
                lines.append(json.dumps(ev))
        return "\n".join(lines) + "\n"


def single_pass_denominator(prompt_len: int, decode_len: int) -> float:
    """Reference cost: one full pre-fill step plus never-evicting decode."""
    if prompt_len < 1 or decode_len < 0:
        raise ContractError("need prompt_len >= 1 and decode_len >= 0")
    return float(prompt_len * prompt_len
                 + sum(prompt_len + i for i in range(1, decode_len + 1)))


def _report_from_series(series: Sequence[tuple[int, float]], prompt_len: int,
                        decode_len: int) -> FootprintReport:
    numerator = 0.0
    peak = 0.0
    for q_count, mean_resident in series:
        numerator += q_count * mean_resident
        peak = max(peak, mean_resident)
    footprint = numerator / single_pass_denominator(prompt_len, decode_len)
    return FootprintReport(footprint, peak / (prompt_len + decode_len), tuple(series))


def kv_footprint(ledger: KVLedger, prompt_len: int, decode_len: int) -> float:
    return ledger.report(prompt_len, decode_len).footprint


def peak_kv(ledger: KVLedger, prompt_len: int, decode_len: int) -> float:
    return ledger.report(prompt_len, decode_len).peak_kv


def critical_footprint(points: Sequence[tuple[float, float]], full_score: float,
                       threshold_fraction: float = 0.9) -> Optional[float]:
    """Smallest footprint whose score still clears threshold_fraction of the
    full-cache score; None when no point qualifies."""
    if not points:
        raise ContractError("critical_footprint needs at least one point")
    bar = threshold_fraction * full_score
    good = [fp for fp, score in points if score >= bar]
    return min(good) if good else None


def replay_check(log_text: str) -> FootprintReport:
    """Recompute the footprint from an event log alone.

    Resident counts are rebuilt from create/evict events, so agreement with
    the live report certifies the recorded series.
    """
    lines = [json.loads(line) for line in log_text.splitlines() if line.strip()]
    if not lines or not lines[0].get("meta"):
        raise IntegrityError("event log must start with a meta line")
    meta = lines[0]
    layers, kv_heads = meta["layers"], meta["kv_heads"]
    resident = np.zeros((layers, kv_heads), dtype=np.int64)
    created: dict[int, int] = {}           # id -> creating step
    evicted: set[int] = set()
    series: list[tuple[int, float]] = []
    snapshot_of: list[Optional[float]] = []
    q_counts: list[int] = []
    kinds: list[str] = []
    current = -1

    def close_current():
        if current >= 0 and snapshot_of[current] is None:
            snapshot_of[current] = float(np.mean(resident))

    for rec in lines[1:]:
        if "event" in rec:
            step = rec["step"]
            if step != current:
                raise IntegrityError("event attached to a step that is not current")
            eid = rec["entry_id"]
            if rec["event"] == "create":
                if snapshot_of[current] is not None:
                    raise IntegrityError("creation after the step's evictions began")
                if eid in created:
                    raise IntegrityError(f"entry id {eid} created twice")
                created[eid] = step
                resident[rec["layer"], rec["head"]] += 1
            elif rec["event"] == "evict":
                close_current()
                if eid not in created:
                    raise IntegrityError(f"eviction of unknown entry id {eid}")
                if eid in evicted:
                    raise IntegrityError(f"entry id {eid} evicted twice")
                if created[eid] > step:
                    raise IntegrityError("entry evicted before creation")
                evicted.add(eid)
                resident[rec["layer"], rec["head"]] -= 1
                if resident[rec["layer"], rec["head"]] < 0:
                    raise IntegrityError("resident count went negative during replay")
            else:
                raise IntegrityError(f"unknown event {rec['event']!r}")
        elif "q0" in rec:
            close_current()
            if rec["step"] != current + 1:
                raise IntegrityError("step lines out of order")
            current += 1
            snapshot_of.append(None)
            q_counts.append(rec["q1"] - rec["q0"])
            kinds.append(rec["kind"])
        else:
            raise IntegrityError("unrecognized event log line")
    close_current()
    for q, snap in zip(q_counts, snapshot_of):
        series.append((q, snap))
    return _report_from_series(series, meta["prompt_len"], meta["decode_len"])
