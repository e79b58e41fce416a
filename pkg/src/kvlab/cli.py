"""Command line entry point.

Every subcommand reads one key-value config file (`--config`, `key = value`
lines, values parsed as JSON with a bare-string fallback) and any number of
`--set key=value` overrides, applied last. `kvlab <command> --help` lists the
commands; the README documents the keys each one understands.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .data import gen_pretrain_sequence
from .errors import ConfigurationError, KvlabError
from .gates import GateParams, SparsitySchedule, save_gates
from .harness import (
    apply_overrides,
    emit_report,
    experiment_from_dict,
    parse_config_file,
    rows_from_csv_text,
    rows_to_csv_text,
    run_sweep,
    summarize,
)
from .ledger import replay_check
from .model import ModelConfig, StreamingSpec, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, pretrain_lm, run_duo, run_prulong

MODEL_KEYS = {
    "num_layers": 4,
    "num_query_heads": 8,
    "num_kv_heads": 4,
    "head_dim": 32,
    "vocab_size": 64,
    "max_positions": 1024,
    "rope_base": 10000.0,
    "ffn_mult": 2,
}

TRAIN_KEYS = {
    "steps": 100,
    "seq_len": 512,
    "batch_tokens": 512,
    "lr_weights": 0.0,
    "lr_log_alpha": 1.0,
    "lr_lambda": 1.0,
    "adam_beta1": 0.9,
    "adam_beta2": 0.95,
    "adam_eps": 1e-8,
    "warmup_frac": 0.1,
    "final_lr_frac": 0.01,
    "grad_clip": 1.0,
    "duo_l1": 0.05,
    "divergence_nll": 30.0,
    "seed": 0,
}

DATA_KEYS = {
    "key_len": 4,
    "passkey_prob": 0.5,
    "span_len": 8,
    "num_copies": 4,
}

SPEC_KEYS = {
    "sink_size": 4,
    "window_size": 32,
}


def _config_from(args) -> dict:
    raw = parse_config_file(args.config) if args.config else {}
    return apply_overrides(raw, args.set or [])


def _take(raw: dict, defaults: dict) -> dict:
    return {k: raw.pop(k, v) for k, v in defaults.items()}


def _reject_leftovers(raw: dict, command: str) -> None:
    if raw:
        raise ConfigurationError(
            f"unknown config keys for {command}: {sorted(raw)}")


def _data_fn(seq_len: int, vocab: int, data: dict):
    def fn(rng: np.random.Generator) -> np.ndarray:
        return gen_pretrain_sequence(
            seq_len, rng, vocab=vocab, key_len=data["key_len"],
            passkey_prob=data["passkey_prob"], span_len=data["span_len"],
            num_copies=data["num_copies"])
    return fn


def cmd_pretrain(args) -> int:
    raw = _config_from(args)
    model_cfg = ModelConfig(**_take(raw, MODEL_KEYS))
    train_cfg = TrainConfig(**_take(raw, TRAIN_KEYS))
    data = _take(raw, DATA_KEYS)
    model_out = raw.pop("model_out", "model.json")
    model_in = raw.pop("model_in", None)
    metrics_out = raw.pop("metrics_out", None)
    _reject_leftovers(raw, "pretrain")
    init = None
    if model_in:
        loaded_cfg, init = load_checkpoint(model_in)
        if loaded_cfg != model_cfg:
            raise ConfigurationError(
                "model_in checkpoint disagrees with the configured model shape")
    weights = pretrain_lm(model_cfg, train_cfg,
                          _data_fn(train_cfg.seq_len, model_cfg.vocab_size, data),
                          metrics_path=metrics_out, init=init)
    save_checkpoint(model_out, model_cfg, weights)
    print(f"saved model checkpoint to {model_out}")
    return 0


def cmd_prulong(args) -> int:
    raw = _config_from(args)
    train_cfg = TrainConfig(**_take(raw, TRAIN_KEYS))
    data = _take(raw, DATA_KEYS)
    spec = StreamingSpec(**_take(raw, SPEC_KEYS))
    model_in = raw.pop("model_in", "model.json")
    gates_out = raw.pop("gates_out", "gates.json")
    metrics_out = raw.pop("metrics_out", None)
    final_target = float(raw.pop("final_target", 0.5))
    warmup_steps = int(raw.pop("warmup_steps", round(0.8 * train_cfg.steps)))
    _reject_leftovers(raw, "prulong")
    model_cfg, weights = load_checkpoint(model_in)
    schedule = SparsitySchedule(warmup_steps=warmup_steps,
                                final_target=final_target,
                                total_steps=train_cfg.steps)
    train_cfg = replace(train_cfg, loss_mode="prulong", schedule=schedule)
    gates = run_prulong(model_cfg, weights, train_cfg,
                        _data_fn(train_cfg.seq_len, model_cfg.vocab_size, data),
                        metrics_path=metrics_out, spec=spec)
    save_gates(gates_out, gates)
    print(f"saved gate checkpoint to {gates_out}")
    return 0


def cmd_duo(args) -> int:
    raw = _config_from(args)
    train_cfg = TrainConfig(**_take(raw, TRAIN_KEYS))
    data = _take(raw, DATA_KEYS)
    spec = StreamingSpec(**_take(raw, SPEC_KEYS))
    model_in = raw.pop("model_in", "model.json")
    duo_out = raw.pop("duo_out", "duo.json")
    metrics_out = raw.pop("metrics_out", None)
    _reject_leftovers(raw, "duo")
    model_cfg, weights = load_checkpoint(model_in)
    train_cfg = replace(train_cfg, loss_mode="duo")
    z = run_duo(model_cfg, weights, train_cfg,
                _data_fn(train_cfg.seq_len, model_cfg.vocab_size, data),
                metrics_path=metrics_out, spec=spec)
    # Stored through the gate format: discretize only ever ranks the values,
    # so interpolation weights in [0,1] serve directly as the logits.
    save_gates(duo_out, GateParams(log_alpha=z))
    print(f"saved interpolation weights to {duo_out}")
    return 0


def cmd_sweep(args) -> int:
    import os
    raw = _config_from(args)
    config = experiment_from_dict(raw)
    rows = run_sweep(config)
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "results.csv")
    with open(path, "w") as f:
        f.write(rows_to_csv_text(rows))
    failed = sum(1 for r in rows if r.score is None)
    print(f"wrote {len(rows)} rows to {path} ({failed} failed)")
    return 0


def cmd_report(args) -> int:
    import os
    raw = _config_from(args)
    out_dir = raw.pop("out_dir", "results")
    threshold = float(raw.pop("threshold_fraction", 0.9))
    _reject_leftovers(raw, "report")
    with open(os.path.join(out_dir, "results.csv")) as f:
        rows = rows_from_csv_text(f.read())
    summary = summarize(rows, threshold)
    paths = emit_report(rows, summary, out_dir)
    for p in paths:
        print(p)
    return 0


def cmd_footprint(args) -> int:
    with open(args.log) as f:
        report = replay_check(f.read())
    print(f"footprint={report.footprint!r} peak={report.peak_kv!r} "
          f"steps={len(report.steps)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvlab",
        description="Toy-scale KV cache compression experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "pretrain": (cmd_pretrain, "train a toy language model"),
        "prulong": (cmd_prulong, "learn per-head streaming gates"),
        "duo": (cmd_duo, "fit continuous head interpolation weights"),
        "sweep": (cmd_sweep, "run a method/setting/chunk grid"),
        "report": (cmd_report, "summarize a sweep and emit CSVs/plots"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.set_defaults(fn=fn)
    p = sub.add_parser("footprint", help="replay an event log and print its footprint")
    p.add_argument("log", help="event-log file emitted by a sweep")
    p.set_defaults(fn=cmd_footprint)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (KvlabError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
