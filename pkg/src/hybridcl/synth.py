"""Synthetic "languages": symbol prototypes in feature space plus a bigram symbol chain.

Every language shares the symbol inventory 1..V-1 but maps symbols to its own
random prototype vectors, so learning a new language overwrites the
feature-to-symbol mapping of the previous one.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .numcore import ContractError, make_rng

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 13
    feat_dim: int = 8
    u_min: int = 2
    u_max: int = 8
    d_min: int = 1
    d_max: int = 3
    clean_sigma: float = 0.1
    noise_sigma: float = 0.5
    train_clean: int = 80
    train_noisy: int = 40
    val_clean: int = 20
    val_noisy: int = 20
    test_clean: int = 20
    test_noisy: int = 20
    # Per-task multiplier on both noise levels, indexed by task_id - 1; missing entries mean 1.
    difficulty: tuple = ()

    def __post_init__(self):
        if not 1 <= self.u_min <= self.u_max:
            raise ContractError("need 1 <= u_min <= u_max")
        if not 1 <= self.d_min <= self.d_max:
            raise ContractError("need 1 <= d_min <= d_max")
        if self.vocab_size < 2:
            raise ContractError("vocab_size must be >= 2")

    def counts(self, split: str) -> tuple[int, int]:
        return getattr(self, f"{split}_clean"), getattr(self, f"{split}_noisy")

    def difficulty_for(self, task_id: int) -> float:
        return float(self.difficulty[task_id - 1]) if task_id - 1 < len(self.difficulty) else 1.0


@dataclass
class Utterance:
    features: np.ndarray
    targets: tuple
    noisy: bool
    task_id: int

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class TaskDataset:
    task_id: int
    train: list
    val: list
    test: list

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def test_condition(self, noisy: bool) -> list:
        return [u for u in self.test if u.noisy == noisy]

    def counts(self) -> dict:
        return {s: {"clean": sum(not u.noisy for u in self.split(s)),
                    "noisy": sum(u.noisy for u in self.split(s))} for s in SPLITS}


@dataclass
class LanguageSpec:
    task_id: int
    prototypes: np.ndarray      # [V-1, F]; row s-1 belongs to symbol s
    transitions: np.ndarray     # [V-1, V-1] row-stochastic
    u_range: tuple
    d_range: tuple
    clean_sigma: float
    noise_sigma: float

    @property
    def num_symbols(self) -> int:
        return self.prototypes.shape[0]

    def stationary(self) -> np.ndarray:
        vals, vecs = np.linalg.eig(self.transitions.T)
        pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        return pi / pi.sum()


def make_language(task_id: int, global_seed: int, config: SynthConfig = SynthConfig()) -> LanguageSpec:
    if task_id < 1:
        raise ContractError("task ids start at 1")
    rng = make_rng(global_seed, "lang", task_id)
    n = config.vocab_size - 1
    prototypes = rng.standard_normal((n, config.feat_dim))
    raw = rng.uniform(0.05, 1.0, size=(n, n))
    scale = config.difficulty_for(task_id)
    return LanguageSpec(
        task_id=task_id,
        prototypes=prototypes,
        transitions=raw / raw.sum(axis=1, keepdims=True),
        u_range=(config.u_min, config.u_max),
        d_range=(config.d_min, config.d_max),
        clean_sigma=config.clean_sigma * scale,
        noise_sigma=config.noise_sigma * scale,
    )


def sample_symbols(spec: LanguageSpec, rng: np.random.Generator) -> list[int]:
    U = int(rng.integers(spec.u_range[0], spec.u_range[1] + 1))
    n = spec.num_symbols
    state = int(rng.choice(n, p=spec.stationary()))
    out = [state]
    for _ in range(U - 1):
        state = int(rng.choice(n, p=spec.transitions[state]))
        out.append(state)
    return [s + 1 for s in out]


def sample_utterance(spec: LanguageSpec, clean: bool, rng: np.random.Generator) -> Utterance:
    """Draw one utterance; adjacent repeated symbols get a prototype-free gap frame between them."""
    targets = sample_symbols(spec, rng)
    durations = rng.integers(spec.d_range[0], spec.d_range[1] + 1, size=len(targets))
    means = []
    for i, (sym, d) in enumerate(zip(targets, durations)):
        if i and targets[i - 1] == sym:
            means.append(np.zeros(spec.prototypes.shape[1]))
        means.extend([spec.prototypes[sym - 1]] * int(d))
    means = np.asarray(means)
    feats = means + spec.clean_sigma * rng.standard_normal(means.shape)
    if not clean:
        feats = feats + spec.noise_sigma * rng.standard_normal(means.shape)
    return Utterance(features=feats, targets=tuple(targets), noisy=not clean, task_id=spec.task_id)


def build_task(task_id: int, global_seed: int, config: SynthConfig = SynthConfig()) -> TaskDataset:
    spec = make_language(task_id, global_seed, config)
    splits = {}
    for split in SPLITS:
        n_clean, n_noisy = config.counts(split)
        utts = []
        for cond, n in (("clean", n_clean), ("noisy", n_noisy)):
            rng = make_rng(global_seed, "data", task_id, split, cond)
            utts.extend(sample_utterance(spec, cond == "clean", rng) for _ in range(n))
        splits[split] = utts
    return TaskDataset(task_id=task_id, **splits)


def build_task_stream(config: SynthConfig, global_seed: int, num_tasks: int = 5,
                      order: Optional[Sequence[int]] = None) -> list[TaskDataset]:
    """Datasets for tasks 1..num_tasks, in ``order`` if given (a permutation of the task ids)."""
    if num_tasks < 1:
        raise ContractError("num_tasks must be positive")
    ids = list(range(1, num_tasks + 1))
    if order is not None:
        if sorted(order) != ids:
            raise ContractError(f"task order {list(order)} is not a permutation of {ids}")
        ids = list(order)
    return [build_task(t, global_seed, config) for t in ids]


# -- dump format ------------------------------------------------------------

def _encode_features(x: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(x, dtype="<f8").tobytes()).decode("ascii")


def _decode_features(s: str, T: int) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(T, -1).astype(np.float64)


def dump_task(task: TaskDataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for split in SPLITS:
            for u in task.split(split):
                rec = {"task_id": task.task_id, "split": split, "noisy": bool(u.noisy),
                       "targets": list(u.targets), "T": u.num_frames,
                       "features": _encode_features(u.features)}
                fh.write(json.dumps(rec) + "\n")


def load_task(path) -> TaskDataset:
    splits = {s: [] for s in SPLITS}
    task_id = None
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            task_id = rec["task_id"] if task_id is None else task_id
            if rec["task_id"] != task_id:
                raise ValueError(f"{path}: mixed task ids {task_id} and {rec['task_id']}")
            splits[rec["split"]].append(Utterance(
                features=_decode_features(rec["features"], rec["T"]),
                targets=tuple(rec["targets"]), noisy=rec["noisy"], task_id=task_id))
    if task_id is None:
        raise ValueError(f"{path}: no records")
    return TaskDataset(task_id=task_id, **splits)


def iter_utterances(tasks: Sequence[TaskDataset]) -> Iterator[Utterance]:
    for task in tasks:
        for split in SPLITS:
            yield from task.split(split)
