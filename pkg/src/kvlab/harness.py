"""Experiment orchestration: sweeps over mask sparsities, eviction retentions
and chunk sizes; task scoring; critical-footprint summaries; CSV and SVG
reports. Everything is deterministic in the configuration, down to the bytes
of the emitted files.

Scores live on a 0..100 scale: retrieval tasks use exact-match percentage and
language-model tasks use 100 * exp(-mean NLL), which orders runs identically
to (negative) perplexity.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import gen_passkey, gen_recall_corpus
from .errors import ConfigurationError, ContractError
from .eviction import EvictionPolicy, chunked_prefill
from .gates import discretize, load_gates
from .ledger import KVLedger, critical_footprint
from .model import (
    FULL,
    STREAMING,
    ModelConfig,
    StreamingSpec,
    decode_greedy,
    full_modes,
    load_checkpoint,
)
from .trainer import nll_value

EVICTION_METHODS = ("snap", "snap_patched", "pyramid", "pyramid_patched", "l2key")
MASK_METHODS = ("gates", "duo", "random")
RESULT_FIELDS = ("method", "setting", "chunk", "task", "seed", "score",
                 "footprint", "peak")
SUMMARY_FIELDS = ("method", "task", "critical_footprint", "full_score")
SCORE_NOTE = "# score: passkey = exact-match %; lm = 100*exp(-mean NLL)"
DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10)) + (1.0,)


@dataclass(frozen=True)
class ExperimentConfig:
    model_path: str
    gates_path: Optional[str] = None
    duo_path: Optional[str] = None
    methods: tuple = ("none", "snap", "snap_patched")
    retention_grid: tuple = DEFAULT_GRID
    sparsity_grid: tuple = DEFAULT_GRID
    chunk_sizes: tuple = (64, 256)      # 0 means single pass
    tasks: tuple = ("passkey",)
    seeds: tuple = (0, 1, 2, 3, 4)
    threshold_fraction: float = 0.9
    seq_len: int = 512
    key_len: int = 4
    recall_span: int = 8
    recall_copies: int = 4
    sink_size: int = 4
    window_size: int = 32
    observation_window: int = 16
    smoothing_kernel: int = 7
    protected_tail: Optional[int] = None
    pyramid_ratio: float = 8.0
    group_pooled: bool = True
    out_dir: str = "results"

    def __post_init__(self):
        if not self.methods:
            raise ConfigurationError("method grid must be non-empty")
        if not (0.0 < self.threshold_fraction < 1.0):
            raise ConfigurationError("threshold_fraction must lie in (0,1)")
        for m in self.methods:
            if m not in EVICTION_METHODS + MASK_METHODS + ("none",):
                raise ConfigurationError(f"unknown method {m!r}")
        for t in self.tasks:
            if t not in ("passkey", "lm"):
                raise ConfigurationError(f"unknown task {t!r}")

    @property
    def spec(self) -> StreamingSpec:
        return StreamingSpec(self.sink_size, self.window_size)


@dataclass(frozen=True)
class ResultRow:
    method: str
    setting: float
    chunk: int
    task: str
    seed: int
    score: Optional[float]      # None marks a failed row
    footprint: Optional[float]
    peak: Optional[float]


# --------------------------------------------------------------------------
# config file parsing


def parse_config_file(path) -> dict:
    """`key = value` lines; values are JSON when parseable, else raw strings.
    '#' starts a comment."""
    out: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, _, raw = line.partition("=")
            out[key.strip()] = _parse_value(raw.strip())
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        return raw


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Each override is key=value with the same value syntax as the file."""
    merged = dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must be key=value")
        key, _, raw = item.partition("=")
        merged[key.strip()] = _parse_value(raw.strip())
    return merged


_TUPLE_KEYS = ("methods", "retention_grid", "sparsity_grid", "chunk_sizes",
               "tasks", "seeds")


def experiment_from_dict(raw: dict) -> ExperimentConfig:
    known = {f.name for f in ExperimentConfig.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    cooked = dict(raw)
    for key in _TUPLE_KEYS:
        if key in cooked:
            value = cooked[key]
            cooked[key] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
    return ExperimentConfig(**cooked)


# --------------------------------------------------------------------------
# sweep


def _task_instance(task: str, config: ExperimentConfig, seed: int):
    """The same (task, seed) pair maps to the same instance for every method."""
    if task == "passkey":
        rng = np.random.default_rng([101, seed])
        depth = float(rng.uniform(0.0, 1.0))
        inst = gen_passkey(config.seq_len, depth, config.key_len, rng)
        return inst.prompt, inst.answer
    rng = np.random.default_rng([202, seed])
    return gen_recall_corpus(config.seq_len, config.recall_span,
                             config.recall_copies, rng), None


def _policy_for(method: str, setting: float, config: ExperimentConfig) -> EvictionPolicy:
    base = method.removesuffix("_patched")
    return EvictionPolicy(
        method=base if base in ("snap", "pyramid", "l2key") else "none",
        retention_fraction=setting if base in ("snap", "pyramid", "l2key") else 1.0,
        observation_window=config.observation_window,
        smoothing_kernel=config.smoothing_kernel,
        patched=method.endswith("_patched"),
        group_pooled=config.group_pooled,
        protected_tail=config.protected_tail,
        pyramid_ratio=config.pyramid_ratio,
    )


def _random_modes(model: ModelConfig, sparsity: float, seed: int):
    total = model.num_layers * model.num_query_heads
    n_stream = int(np.floor(sparsity * total))
    rng = np.random.default_rng([303, seed])
    picks = set(map(int, rng.choice(total, size=n_stream, replace=False)))
    return [[STREAMING if l * model.num_query_heads + h in picks else FULL
             for h in range(model.num_query_heads)]
            for l in range(model.num_layers)]


def _head_modes_for(method: str, setting: float, seed: int, model: ModelConfig,
                    gate_strengths: Optional[np.ndarray],
                    duo_strengths: Optional[np.ndarray]):
    if method in ("none",) + EVICTION_METHODS:
        return full_modes(model)
    if method == "gates":
        if gate_strengths is None:
            raise ContractError("method 'gates' needs a gate checkpoint")
        return discretize(gate_strengths, setting)
    if method == "duo":
        if duo_strengths is None:
            raise ContractError("method 'duo' needs a trained interpolation table")
        return discretize(duo_strengths, setting)
    return _random_modes(model, setting, seed)


def _event_log_name(method: str, setting: float, chunk: int, task: str, seed: int) -> str:
    return f"{method}-s{setting:g}-c{chunk}-{task}-{seed}.jsonl"


def run_row(model: ModelConfig, weights: dict, config: ExperimentConfig,
            method: str, setting: float, chunk: int, task: str, seed: int,
            gate_strengths=None, duo_strengths=None) -> tuple[ResultRow, str]:
    """Score one grid point; returns the row plus its event-log text."""
    prompt, answer = _task_instance(task, config, seed)
    head_modes = _head_modes_for(method, setting, seed, model, gate_strengths,
                                 duo_strengths)
    policy = _policy_for(method, setting, config)
    ledger = KVLedger(model.num_layers, model.num_kv_heads)
    chunk_size = len(prompt) if chunk == 0 else chunk
    res = chunked_prefill(model, weights, prompt, chunk_size, policy,
                          head_modes=head_modes, spec=config.spec, ledger=ledger)
    if task == "passkey":
        out = decode_greedy(model, weights, res.cache, head_modes, None,
                            len(answer), res.last_logits, spec=config.spec,
                            ledger=ledger)
        score = 100.0 * float(np.array_equal(out, answer))
        decode_len = len(answer)
    else:
        score = 100.0 * float(np.exp(-nll_value(res.logits[:-1], prompt[1:])))
        decode_len = 0
    report = ledger.report(len(prompt), decode_len)
    row = ResultRow(method, setting, chunk, task, seed, score,
                    report.footprint, report.peak_kv)
    return row, ledger.to_event_log(len(prompt), decode_len)


def sweep_plan(config: ExperimentConfig) -> list[tuple[str, float, int, str, int]]:
    """Deterministic row order, methods in configured order. The "none"
    method is the full-attention baseline and always runs single-pass."""
    plan = []
    for method in config.methods:
        if method == "none":
            settings, chunks = (1.0,), (0,)
        elif method in EVICTION_METHODS:
            settings, chunks = config.retention_grid, config.chunk_sizes
        else:
            settings, chunks = config.sparsity_grid, config.chunk_sizes
        for setting in settings:
            for chunk in chunks:
                for task in config.tasks:
                    for seed in config.seeds:
                        item = (method, float(setting), int(chunk), task, int(seed))
                        if item not in plan:
                            plan.append(item)
    return plan


def run_sweep(config: ExperimentConfig, model: Optional[ModelConfig] = None,
              weights: Optional[dict] = None,
              gate_strengths: Optional[np.ndarray] = None,
              duo_strengths: Optional[np.ndarray] = None,
              write_logs: bool = True) -> list[ResultRow]:
    """Run the whole grid. Checkpoints are loaded from the config unless the
    caller injects them. A row that raises is emitted as an error marker; the
    sweep continues."""
    if model is None or weights is None:
        model, weights = load_checkpoint(config.model_path)
    if gate_strengths is None and config.gates_path:
        gate_strengths = load_gates(config.gates_path).log_alpha
    if duo_strengths is None and config.duo_path:
        duo_strengths = load_gates(config.duo_path).log_alpha
    log_dir = os.path.join(config.out_dir, "events")
    if write_logs:
        os.makedirs(log_dir, exist_ok=True)
    rows = []
    for method, setting, chunk, task, seed in sweep_plan(config):
        try:
            row, log_text = run_row(model, weights, config, method, setting,
                                    chunk, task, seed, gate_strengths,
                                    duo_strengths)
        except Exception:
            rows.append(ResultRow(method, setting, chunk, task, seed,
                                  None, None, None))
            continue
        rows.append(row)
        if write_logs:
            name = _event_log_name(method, setting, chunk, task, seed)
            with open(os.path.join(log_dir, name), "w") as f:
                f.write(log_text)
    return rows


# --------------------------------------------------------------------------
# summaries and reports


def _fmt(x) -> str:
    if x is None:
        return "error"
    if isinstance(x, float):
        return repr(float(x))
    return str(x)


def rows_to_csv_text(rows: Sequence[ResultRow]) -> str:
    lines = [SCORE_NOTE, ",".join(RESULT_FIELDS)]
    for r in rows:
        lines.append(",".join([
            r.method, f"{r.setting:g}", str(r.chunk), r.task, str(r.seed),
            _fmt(r.score), _fmt(r.footprint), _fmt(r.peak),
        ]))
    return "\n".join(lines) + "\n"


def rows_from_csv_text(text: str) -> list[ResultRow]:
    rows = []
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    if not lines or lines[0] != ",".join(RESULT_FIELDS):
        raise ContractError("results CSV header mismatch")
    for line in lines[1:]:
        method, setting, chunk, task, seed, score, fp, peak = line.split(",")
        err = score == "error"
        rows.append(ResultRow(method, float(setting), int(chunk), task, int(seed),
                              None if err else float(score),
                              None if err else float(fp),
                              None if err else float(peak)))
    return rows


def full_scores_by_task(rows: Sequence[ResultRow]) -> dict[str, float]:
    """Mean single-pass full-attention score per task (the baseline rows)."""
    out: dict[str, float] = {}
    for task in sorted({r.task for r in rows}):
        base = [r.score for r in rows
                if r.task == task and r.method == "none" and r.chunk == 0
                and r.score is not None]
        if not base:
            raise ContractError(f"no full-attention baseline rows for task {task!r}")
        out[task] = float(np.mean(base))
    return out


def summarize(rows: Sequence[ResultRow], threshold_fraction: float = 0.9) -> list[dict]:
    """Critical footprint per (method, task): the cheapest grid point whose
    mean score stays above threshold_fraction of the full-attention score."""
    full = full_scores_by_task(rows)
    out = []
    methods = []
    for r in rows:
        if r.method not in methods:
            methods.append(r.method)
    for method in methods:
        for task in sorted({r.task for r in rows if r.method == method}):
            good = [r for r in rows if r.method == method and r.task == task
                    and r.score is not None]
            points: dict[tuple[float, int], list[ResultRow]] = {}
            for r in good:
                points.setdefault((r.setting, r.chunk), []).append(r)
            curve = [(float(np.mean([r.footprint for r in rs])),
                      float(np.mean([r.score for r in rs])))
                     for rs in points.values()]
            value = critical_footprint(curve, full[task], threshold_fraction) \
                if curve else None
            out.append({
                "method": method,
                "task": task,
                "critical_footprint": "not achieved" if value is None else repr(value),
                "full_score": repr(full[task]),
            })
    return out


def summary_to_csv_text(summary: Sequence[dict]) -> str:
    lines = [",".join(SUMMARY_FIELDS)]
    for row in summary:
        lines.append(",".join(str(row[k]) for k in SUMMARY_FIELDS))
    return "\n".join(lines) + "\n"


def emit_report(rows: Sequence[ResultRow], summary: Sequence[dict], out_dir) -> list[str]:
    """Write results.csv, summary.csv and one score-vs-footprint SVG per task.
    Returns the paths written."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        results_path = os.path.join(out_dir, "results.csv")
        with open(results_path, "w") as f:
            f.write(rows_to_csv_text(rows))
        paths.append(results_path)
        summary_path = os.path.join(out_dir, "summary.csv")
        with open(summary_path, "w") as f:
            f.write(summary_to_csv_text(summary))
        paths.append(summary_path)
        scored = [r for r in rows if r.score is not None]
        if scored:
            full = full_scores_by_task(scored)
            for task in sorted({r.task for r in scored}):
                path = os.path.join(out_dir, f"score_vs_footprint_{task}.svg")
                _plot_task(scored, task, full[task], path)
                paths.append(path)
        return paths
    except OSError as e:
        raise ContractError(f"report emission failed under {out_dir}: {e}") from e


def _plot_task(rows: Sequence[ResultRow], task: str, full_score: float, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "kv-report"

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    methods = []
    for r in rows:
        if r.task == task and r.method not in methods:
            methods.append(r.method)
    for method in methods:
        chunks = sorted({r.chunk for r in rows
                         if r.task == task and r.method == method})
        for chunk in chunks:
            pts: dict[float, list[ResultRow]] = {}
            for r in rows:
                if r.task == task and r.method == method and r.chunk == chunk:
                    pts.setdefault(r.setting, []).append(r)
            xs, ys = [], []
            for setting in sorted(pts):
                xs.append(float(np.mean([r.footprint for r in pts[setting]])))
                ys.append(float(np.mean([r.score for r in pts[setting]])))
            order = np.argsort(xs)
            label = method if chunk == 0 else f"{method} (chunk {chunk})"
            ax.plot(np.array(xs)[order], np.array(ys)[order], marker="o",
                    label=label)
    ax.axhline(full_score, linestyle="--", linewidth=1, color="gray",
               label="full attention")
    ax.axhline(0.9 * full_score, linestyle=":", linewidth=1, color="gray",
               label="0.9 x full")
    ax.set_xlim(min(0.0, *(ax.get_xlim())), max(1.0, ax.get_xlim()[1]))
    ax.set_xlabel("kv footprint")
    ax.set_ylabel("score")
    ax.set_title(f"{task}: score vs footprint")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
