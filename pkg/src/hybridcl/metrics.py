"""WER, AvgWER, BWT and the lower-triangular results matrix."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .numcore import ContractError

CHANNELS = ("rnnt_clean", "rnnt_noisy", "ctc_clean", "ctc_noisy")


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(refs: Sequence[Sequence], hyps: Sequence[Sequence], clip: bool = False) -> float:
    """Corpus-level error rate: total edits over total reference tokens."""
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references but {len(hyps)} hypotheses")
    n_ref = sum(len(r) for r in refs)
    if n_ref == 0:
        raise ContractError("total reference length is zero")
    rate = sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / n_ref
    return min(rate, 1.0) if clip else rate


class ResultsMatrix:
    """W[k][i] for 1 <= i <= k <= K, one float per channel; cells are write-once."""

    def __init__(self, K: int):
        if K < 1:
            raise ContractError("K must be >= 1")
        self.K = K
        self._cells: dict[tuple[int, int], dict[str, float]] = {}

    def _check(self, k: int, i: int) -> None:
        if not 1 <= i <= k <= self.K:
            raise ContractError(f"cell ({k}, {i}) outside the lower triangle of a {self.K}-task matrix")

    def set_cell(self, k: int, i: int, values: dict) -> None:
        self._check(k, i)
        if (k, i) in self._cells:
            raise ContractError(f"cell ({k}, {i}) already written")
        if set(values) != set(CHANNELS):
            raise ContractError(f"cell needs exactly the channels {CHANNELS}")
        if any(v < 0 for v in values.values()):
            raise ContractError("WER values must be non-negative")
        self._cells[(k, i)] = {c: float(values[c]) for c in CHANNELS}

    def get(self, k: int, i: int, channel: str) -> float:
        self._check(k, i)
        if channel not in CHANNELS:
            raise ContractError(f"unknown channel {channel!r}")
        try:
            return self._cells[(k, i)][channel]
        except KeyError:
            raise ContractError(f"cell ({k}, {i}) not populated") from None

    def has(self, k: int, i: int) -> bool:
        return (k, i) in self._cells

    def cells(self):
        """(k, i, values) in row-major order."""
        for key in sorted(self._cells):
            yield key[0], key[1], dict(self._cells[key])

    def is_complete(self, upto: int | None = None) -> bool:
        upto = self.K if upto is None else upto
        return all((k, i) in self._cells for k in range(1, upto + 1) for i in range(1, k + 1))

    def to_dict(self) -> dict:
        return {"K": self.K, "cells": [{"k": k, "i": i, **v} for k, i, v in self.cells()]}

    @classmethod
    def from_dict(cls, d: dict) -> "ResultsMatrix":
        m = cls(int(d["K"]))
        for c in d["cells"]:
            m.set_cell(int(c["k"]), int(c["i"]), {ch: c[ch] for ch in CHANNELS})
        return m

    def __eq__(self, other):
        return isinstance(other, ResultsMatrix) and self.K == other.K and self._cells == other._cells


def avg_wer(matrix: ResultsMatrix, k: int, channel: str) -> float:
    return float(np.mean([matrix.get(k, i, channel) for i in range(1, k + 1)]))


def bwt(matrix: ResultsMatrix, k: int, channel: str) -> float:
    """Mean over i < k of Acc[k, i] - Acc[i, i], with Acc = 1 - W left unclamped."""
    if k < 2:
        raise ContractError("backward transfer is undefined before the second task")
    diffs = [(1.0 - matrix.get(k, i, channel)) - (1.0 - matrix.get(i, i, channel)) for i in range(1, k)]
    return float(sum(diffs) / (k - 1))
