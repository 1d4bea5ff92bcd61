"""Experiment orchestration: config, the sequential task loop, records and plot data."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import atomic_write_text, save_model, save_state
from .metrics import CHANNELS, ResultsMatrix, avg_wer, bwt
from .model import ModelConfig, init_model
from .numcore import make_rng
from .strategies import METHODS, CLHyper, CLState, ConfigError, end_of_task_update
from .synth import SynthConfig, TaskDataset, build_task_stream
from .training import evaluate_matrix_row, train_task

OUTPUT_ROOT_ENV = "HYBRIDCL_OUTPUT_ROOT"
PLOT_COLUMNS = ("method", "epochs", "seed", "k", "i_or_null", "channel", "metric", "value")
MAX_TASKS = 9


class RunFailure(RuntimeError):
    """A run aborted after it started; a partial record may have been written."""


@dataclass(frozen=True)
class ExperimentConfig:
    global_seed: int = 0
    num_tasks: int = 5
    epochs_per_task: int = 1
    method: str = "naive"
    # CL hyperparameters
    lambda_ewc: float = 10.0
    gamma: float = 1.0
    lambda_mas: float = 1.0
    alpha_ctx: float = 0.3
    alpha_kd: float = 0.1
    distill_kind: str = "kl"
    # model
    feat_dim: int = 8
    hidden_dim: int = 32
    vocab_size: int = 13
    conv_kernel: int = 3
    # data
    train_clean: int = 80
    train_noisy: int = 40
    val_clean: int = 20
    val_noisy: int = 20
    test_clean: int = 20
    test_noisy: int = 20
    u_min: int = 2
    u_max: int = 8
    d_min: int = 1
    d_max: int = 3
    clean_sigma: float = 0.1
    noise_sigma: float = 0.5
    task_difficulty: Optional[tuple] = None
    # optimization
    w_ctc: float = 0.3
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_symbols_per_frame: int = 10
    # bookkeeping
    output_dir: str = "runs"
    task_permutation: Optional[tuple] = None
    seeds: tuple = (0,)
    save_checkpoints: bool = True

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 1 <= self.num_tasks <= MAX_TASKS:
            raise ConfigError(f"num_tasks must lie in [1, {MAX_TASKS}]")
        if self.epochs_per_task < 1:
            raise ConfigError("epochs_per_task must be positive")
        if not 0.0 <= self.w_ctc <= 1.0:
            raise ConfigError("w_ctc must lie in [0, 1]")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_symbols_per_frame < 1:
            raise ConfigError("batch_size and max_symbols_per_frame must be positive")
        for split in ("train", "test"):
            if getattr(self, f"{split}_clean") + getattr(self, f"{split}_noisy") < 1:
                raise ConfigError(f"{split} split is empty")
        if self.test_clean < 1 or self.test_noisy < 1:
            raise ConfigError("test split needs both clean and noisy utterances")
        if self.task_permutation is not None and sorted(self.task_permutation) != list(range(1, self.num_tasks + 1)):
            raise ConfigError("task_permutation must be a permutation of 1..num_tasks")
        try:
            self.hyper().validate()
            self.model_config()
            self.synth_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def hyper(self) -> CLHyper:
        return CLHyper(self.lambda_ewc, self.gamma, self.lambda_mas, self.alpha_ctx, self.alpha_kd, self.distill_kind)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.feat_dim, self.hidden_dim, self.vocab_size, self.conv_kernel)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            vocab_size=self.vocab_size, feat_dim=self.feat_dim, u_min=self.u_min, u_max=self.u_max,
            d_min=self.d_min, d_max=self.d_max, clean_sigma=self.clean_sigma, noise_sigma=self.noise_sigma,
            train_clean=self.train_clean, train_noisy=self.train_noisy, val_clean=self.val_clean,
            val_noisy=self.val_noisy, test_clean=self.test_clean, test_noisy=self.test_noisy,
            difficulty=tuple(self.task_difficulty or ()))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("task_difficulty", "task_permutation", "seeds"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in d.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, value, fields[key].default)
        return cls(**kwargs)

    def run_name(self) -> str:
        return f"{self.method}_e{self.epochs_per_task}_s{self.global_seed}"


def _coerce(key, value, default):
    tuple_keys = {"task_difficulty", "task_permutation", "seeds"}
    if key in tuple_keys:
        if value is None:
            return None
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    return value


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; values are JSON scalars/lists, bare words are strings."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    return ExperimentConfig.from_dict(values).validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def format_config(config: ExperimentConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in config.to_dict().items())


def output_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or config.output_dir)


# -- records ----------------------------------------------------------------

@dataclass
class RunRecord:
    config: dict
    matrix: ResultsMatrix
    loss_curves: dict = field(default_factory=dict)   # task index k -> per-epoch mean objective
    wall_clock: dict = field(default_factory=dict)    # task index k -> seconds
    complete: bool = False
    error: Optional[str] = None
    version: str = __version__

    @property
    def K(self) -> int:
        return self.matrix.K

    def completed_tasks(self) -> int:
        k = 0
        while k < self.K and self.matrix.is_complete(k + 1):
            k += 1
        return k

    def avg_wer_series(self) -> dict:
        done = self.completed_tasks()
        return {ch: [avg_wer(self.matrix, k, ch) for k in range(1, done + 1)] for ch in CHANNELS}

    def bwt_series(self) -> dict:
        done = self.completed_tasks()
        return {ch: [bwt(self.matrix, k, ch) for k in range(2, done + 1)] for ch in CHANNELS}

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "complete": self.complete,
            "error": self.error,
            "config": self.config,
            "matrix": self.matrix.to_dict(),
            "avg_wer": self.avg_wer_series(),
            "bwt": self.bwt_series(),
            "loss_curves": {str(k): v for k, v in self.loss_curves.items()},
            "wall_clock": {str(k): v for k, v in self.wall_clock.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(config=d["config"], matrix=ResultsMatrix.from_dict(d["matrix"]),
                   loss_curves={int(k): v for k, v in d.get("loss_curves", {}).items()},
                   wall_clock={int(k): v for k, v in d.get("wall_clock", {}).items()},
                   complete=bool(d["complete"]), error=d.get("error"), version=d.get("version", ""))

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- the run ----------------------------------------------------------------

def build_tasks(config: ExperimentConfig) -> list[TaskDataset]:
    return build_task_stream(config.synth_config(), config.global_seed, config.num_tasks,
                             config.task_permutation)


def run_experiment(config: ExperimentConfig, tasks: Optional[Sequence[TaskDataset]] = None,
                   run_dir: Optional[Path] = None, on_phase: Optional[Callable[[str, int], None]] = None,
                   persist: bool = True) -> RunRecord:
    """Train on tasks 1..K in order, evaluating every seen task after each one.

    Training on task k is handed only ``tasks[k-1].train``. ``on_phase`` is
    called with ("train" | "consolidate" | "eval", k) before each phase.
    """
    config = config.validate()
    if tasks is None:
        tasks = build_tasks(config)
    if len(tasks) != config.num_tasks:
        raise ConfigError(f"expected {config.num_tasks} tasks, got {len(tasks)}")
    if persist and run_dir is None:
        run_dir = output_root(config) / config.run_name()
    notify = on_phase or (lambda phase, k: None)

    seed = config.global_seed
    model = init_model(config.model_config(), seed)
    state = CLState(config.method, config.hyper())
    record = RunRecord(config=config.to_dict(), matrix=ResultsMatrix(config.num_tasks))

    def persist_record():
        if persist:
            run_dir.mkdir(parents=True, exist_ok=True)
            record.save(run_dir / "results.json")

    try:
        for k in range(1, config.num_tasks + 1):
            started = time.perf_counter()
            task = tasks[k - 1]
            notify("train", k)
            record.loss_curves[k] = train_task(
                model, task.train, state, epochs=config.epochs_per_task, lr=config.learning_rate,
                batch_size=config.batch_size, w_ctc=config.w_ctc,
                shuffle_rng=make_rng(seed, "shuffle", task.task_id))
            notify("consolidate", k)
            state = end_of_task_update(config.method, model, task.train, state, config.w_ctc, config.batch_size)
            notify("eval", k)
            evaluate_matrix_row(model, tasks, k, record.matrix)
            record.wall_clock[k] = time.perf_counter() - started
            persist_record()
        record.complete = True
        persist_record()
        if persist and config.save_checkpoints:
            save_model(run_dir / "model.ckpt", model)
            save_state(run_dir / "state.ckpt", state, config.model_config())
    except (OSError, ArithmeticError, RuntimeError) as exc:
        record.error = f"{type(exc).__name__}: {exc}"
        try:
            persist_record()
        except OSError:
            pass
        raise RunFailure(record.error) from exc
    return record


def load_records(directory) -> list[RunRecord]:
    paths = sorted(Path(directory).rglob("results.json"))
    return [RunRecord.load(p) for p in paths]


# -- plot data --------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(x, ".17g")


def plot_rows(records: Sequence[RunRecord]):
    """Long-format rows: every WER cell, then AvgWER per k, then BWT per k."""
    Ks = {r.K for r in records}
    if len(Ks) > 1:
        raise ValueError(f"records disagree on the number of tasks: {sorted(Ks)}")
    for rec in records:
        cfg = rec.config
        base = (cfg["method"], cfg["epochs_per_task"], cfg["global_seed"])
        for k, i, values in rec.matrix.cells():
            for ch in CHANNELS:
                yield (*base, k, i, ch, "wer", values[ch])
        for ch, series in rec.avg_wer_series().items():
            for k, v in enumerate(series, 1):
                yield (*base, k, None, ch, "avg_wer", v)
        for ch, series in rec.bwt_series().items():
            for k, v in enumerate(series, 2):
                yield (*base, k, None, ch, "bwt", v)


def emit_plot_data(records: Sequence[RunRecord], path) -> int:
    """Write the long-format CSV; returns the number of data rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PLOT_COLUMNS)
    n = 0
    for row in plot_rows(records):
        *head, value = row
        writer.writerow([("" if v is None else v) for v in head] + [_fmt(value)])
        n += 1
    atomic_write_text(path, buf.getvalue())
    return n


def read_plot_data(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epochs"] = int(r["epochs"])
        r["seed"] = int(r["seed"])
        r["k"] = int(r["k"])
        r["i_or_null"] = int(r["i_or_null"]) if r["i_or_null"] else None
        r["value"] = float(r["value"])
    return rows


def aggregate(records: Sequence[RunRecord]) -> list[dict]:
    """Mean and min/max envelope across seeds for each (method, epochs, k, channel, metric)."""
    groups: dict[tuple, list[float]] = {}
    for method, epochs, _seed, k, i, ch, metric, value in plot_rows(records):
        if metric == "wer" and i != k:
            continue
        name = "current_wer" if metric == "wer" else metric
        groups.setdefault((method, epochs, k, ch, name), []).append(value)
    out = []
    for key in sorted(groups):
        vals = np.asarray(groups[key])
        out.append(dict(zip(("method", "epochs", "k", "channel", "metric"), key),
                        mean=float(vals.mean()), min=float(vals.min()), max=float(vals.max()), n=int(vals.size)))
    return out


def write_summary(rows: Sequence[dict], path) -> None:
    buf = io.StringIO()
    cols = ("method", "epochs", "k", "channel", "metric", "mean", "min", "max", "n")
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: (_fmt(r[c]) if isinstance(r[c], float) else r[c]) for c in cols})
    atomic_write_text(path, buf.getvalue())


def sweep_configs(base: ExperimentConfig, methods: Sequence[str], epochs: Sequence[int],
                  seeds: Sequence[int]) -> list[ExperimentConfig]:
    return [base.replace(method=m, epochs_per_task=e, global_seed=s).validate()
            for m in methods for e in epochs for s in seeds]


def summarize(record: RunRecord) -> str:
    K = record.completed_tasks()
    parts = [f"{record.config['method']} epochs={record.config['epochs_per_task']} "
             f"seed={record.config['global_seed']} tasks={K}/{record.K}"]
    if K:
        parts.append("avg_wer " + " ".join(f"{ch}={avg_wer(record.matrix, K, ch):.4f}" for ch in CHANNELS))
    if K >= 2:
        parts.append("bwt " + " ".join(f"{ch}={bwt(record.matrix, K, ch):+.4f}" for ch in CHANNELS))
    return " | ".join(parts)
