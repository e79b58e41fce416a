"""Behavioural checks on the trained full-attention baseline."""

import numpy as np

from kvlab import tensor as T
from kvlab.data import gen_passkey, gen_recall_corpus
from kvlab.model import lm_graph, weight_nodes

from conftest import PRETRAIN


def _token_nll(config, weights, seq):
    """Per-position NLL of seq[1:] under teacher forcing."""
    tape = T.Tape()
    wn = weight_nodes(tape, weights, trainable=False)
    logits, _ = lm_graph(tape, config, wn, seq[:-1])
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -logp[np.arange(len(seq) - 1), seq[1:]]


def test_trained_model_solves_held_out_passkey(trained_model):
    config, weights, _, _ = trained_model
    key_len = PRETRAIN["key_len"]
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng([41, seed])
        depth = float(rng.uniform(0.0, 1.0))
        inst = gen_passkey(136 - key_len, depth, key_len, rng)
        seq = inst.prompt
        out = []
        for _ in range(key_len):
            tape = T.Tape()
            wn = weight_nodes(tape, weights, trainable=False)
            logits, _ = lm_graph(tape, config, wn, seq)
            out.append(int(np.argmax(logits.value[-1])))
            seq = np.append(seq, out[-1])
        hits += out == list(inst.answer)
    em = 100.0 * hits / 50
    assert em > 95.0, f"held-out exact match {em:.0f}%"


def test_repeated_span_loss_below_filler_loss(trained_model):
    config, weights, _, _ = trained_model
    span = 8
    copied_gap = []
    for seed in range(20):
        rng = np.random.default_rng([43, seed])
        seq = gen_recall_corpus(128, span, 4, rng)
        nll = _token_nll(config, weights, seq)
        # positions whose window matches an earlier window verbatim
        copied = np.zeros(len(seq), dtype=bool)
        for dst in range(len(seq) - span + 1):
            win = seq[dst:dst + span]
            for src in range(dst):
                if np.array_equal(seq[src:src + span], win):
                    copied[dst + 1:dst + span] = True
                    break
        copy_idx = np.where(copied[1:])[0]
        fill_idx = np.where(~copied[1:])[0]
        if len(copy_idx):
            copied_gap.append(nll[fill_idx].mean() - nll[copy_idx].mean())
    assert np.mean(copied_gap) > 0.0, (
        f"copied-span loss not below filler loss (gap {np.mean(copied_gap):.3f})")
