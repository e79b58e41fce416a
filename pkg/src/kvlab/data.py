"""Synthetic token streams for training and retrieval evaluation.

A tiny vocabulary reserves its lowest ids as markers so that a needle and the
trailing query cue can never be forged by filler text. Everything is a pure
function of its parameters and the rng handed in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ContractError

NUM_RESERVED = 4
NEEDLE_MARKER = 0
QUERY_MARKER = 1


@dataclass(frozen=True)
class TaskInstance:
    prompt: np.ndarray                       # tokens fed before decoding
    answer: np.ndarray                       # expected greedy continuation
    needle_span: Optional[tuple[int, int]]   # [start, end) of marker + key


def gen_zipf(length: int, vocab: int, rng: np.random.Generator,
             exponent: float = 1.1) -> np.ndarray:
    """Zipf-weighted draws over [0, vocab); rank 1 is token 0."""
    if length < 0 or vocab < 1:
        raise ConfigurationError("need length >= 0 and vocab >= 1")
    if exponent <= 0:
        raise ConfigurationError("exponent must be positive")
    weights = np.arange(1, vocab + 1, dtype=np.float64) ** -exponent
    return rng.choice(vocab, size=length, p=weights / weights.sum())


def _filler(length: int, vocab: int, rng: np.random.Generator) -> np.ndarray:
    """Zipf text over the non-reserved range [NUM_RESERVED, vocab)."""
    if vocab <= NUM_RESERVED:
        raise ConfigurationError(f"vocab must exceed {NUM_RESERVED} reserved ids")
    return NUM_RESERVED + gen_zipf(length, vocab - NUM_RESERVED, rng)


def gen_passkey(seq_len: int, depth_fraction: float, key_len: int,
                rng: np.random.Generator, vocab: int = 64) -> TaskInstance:
    """Filler with one marked key buried at the given depth and a trailing
    query marker; the answer replays the key."""
    if not (0.0 <= depth_fraction <= 1.0):
        raise ConfigurationError("depth_fraction must lie in [0,1]")
    if key_len < 1:
        raise ConfigurationError("key_len must be >= 1")
    needle_len = key_len + 1
    if seq_len < needle_len + 2:
        raise ContractError("prompt too short for needle plus query marker")
    prompt = _filler(seq_len, vocab, rng)
    # keys are uniform, not Zipf: exact-match then scores retrieval, not the
    # ability to guess the majority token
    key = NUM_RESERVED + rng.integers(0, vocab - NUM_RESERVED, size=key_len)
    start = int(np.floor(depth_fraction * (seq_len - 1 - needle_len)))
    prompt[start] = NEEDLE_MARKER
    prompt[start + 1:start + needle_len] = key
    prompt[-1] = QUERY_MARKER
    return TaskInstance(prompt, key.copy(), (start, start + needle_len))


def gen_recall_corpus(seq_len: int, span_len: int, num_copies: int,
                      rng: np.random.Generator, vocab: int = 64) -> np.ndarray:
    """Zipf text where spans from the first half recur verbatim in the second
    half, so next-token prediction rewards long-range copying."""
    if span_len < 1 or num_copies < 0:
        raise ConfigurationError("need span_len >= 1 and num_copies >= 0")
    if span_len * num_copies >= seq_len:
        raise ContractError("copied spans must not fill the whole sequence")
    half = seq_len // 2
    if num_copies and (half < span_len or half < num_copies * span_len):
        raise ContractError("sequence too short for that many copies")
    stream = _filler(seq_len, vocab, rng)
    slot = half // num_copies if num_copies else 0
    for i in range(num_copies):
        src = int(rng.integers(0, half - span_len + 1))
        lo = half + i * slot
        dst = lo + int(rng.integers(0, slot - span_len + 1))
        stream[dst:dst + span_len] = stream[src:src + span_len]
    return stream


def gen_echo(seq_len: int, rng: np.random.Generator, vocab: int = 64) -> np.ndarray:
    """Every token immediately repeated (a a b b ...); trains previous-token
    attention through the ordinary LM loss."""
    if seq_len < 0:
        raise ConfigurationError("seq_len must be >= 0")
    base = _filler((seq_len + 1) // 2, vocab, rng)
    return np.repeat(base, 2)[:seq_len]


def gen_retrieval_blocks(seq_len: int, gap_max: int, rng: np.random.Generator,
                         vocab: int = 64, key_len: int = 1
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Dense passkey drill: (lead, marker, key, gap, query, key) blocks packed
    into one sequence. Returns (tokens, positions of the answer tokens); loss
    restricted to those positions supervises retrieval and nothing else.
    gap_max sets the hardest marker-to-query distance; growing it stretches an
    adjacent-copy rule into content-cued retrieval."""
    if gap_max < 0:
        raise ConfigurationError("gap_max must be >= 0")
    if key_len < 1:
        raise ConfigurationError("key_len must be >= 1")
    block_min = 2 + 2 * key_len
    if seq_len < block_min:
        raise ContractError("sequence too short for a single block")
    toks, answers = [], []
    used = 0
    while used + block_min <= seq_len:
        budget = seq_len - used - block_min
        lead = min(int(rng.integers(0, gap_max + 1)), budget)
        gap = min(int(rng.integers(0, gap_max + 1)), budget - lead)
        key = NUM_RESERVED + rng.integers(0, vocab - NUM_RESERVED, size=key_len)
        block = np.concatenate([
            _filler(lead, vocab, rng), [NEEDLE_MARKER], key,
            _filler(gap, vocab, rng), [QUERY_MARKER], key,
        ])
        answers.extend(range(used + len(block) - key_len, used + len(block)))
        toks.append(block)
        used += len(block)
    if used < seq_len:
        toks.append(_filler(seq_len - used, vocab, rng))
    return np.concatenate(toks), np.array(answers, dtype=np.int64)


def gen_pretrain_sequence(seq_len: int, rng: np.random.Generator, vocab: int = 64,
                          key_len: int = 4, passkey_prob: float = 0.5,
                          span_len: int = 8, num_copies: int = 4) -> np.ndarray:
    """Training mix: marked-key retrieval with the answer appended, or plain
    copy-structured text, both exactly seq_len tokens."""
    if rng.random() < passkey_prob:
        inst = gen_passkey(seq_len - key_len, float(rng.uniform(0.0, 1.0)),
                           key_len, rng, vocab)
        return np.concatenate([inst.prompt, inst.answer])
    return gen_recall_corpus(seq_len, span_len, num_copies, rng, vocab)


def dump_tokens(path, sequences) -> None:
    with open(path, "w") as f:
        for seq in sequences:
            f.write(" ".join(str(int(t)) for t in seq) + "\n")


def load_tokens(path) -> list[np.ndarray]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(np.array([int(t) for t in line.split()], dtype=np.int64))
    return out
