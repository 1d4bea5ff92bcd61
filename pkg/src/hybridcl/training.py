"""Training on one task and evaluation against the results matrix."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import model as hm
from .decoding import decode_both
from .metrics import ResultsMatrix, wer
from .numcore import AdamState, ContractError, adam_step
from .strategies import CLState, total_loss


def train_task(model: hm.HybridModel, train: Sequence, state: CLState, *, epochs: int,
               lr: float, batch_size: int, w_ctc: float, shuffle_rng: np.random.Generator) -> list[float]:
    """Adam over ``train`` for ``epochs`` passes; returns the mean objective per epoch.

    ``train`` is the only data this function sees. Optimizer moments start
    fresh for every task.
    """
    if epochs < 1 or batch_size < 1:
        raise ContractError("epochs and batch_size must be positive")
    n = len(train)
    if n == 0:
        raise ContractError("empty training split")
    opt = AdamState.for_params(model.params, lr=lr)
    curve = []
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, batch_size):
            batch = [train[int(j)] for j in order[start:start + batch_size]]
            value, grads = total_loss(state.method, model, batch, state, w_ctc)
            adam_step(model.params, grads, opt)
            total += value
            batches += 1
        curve.append(total / batches)
    return curve


def evaluate_split(model: hm.HybridModel, utterances: Sequence, max_symbols_per_frame: int = 10):
    """(ctc WER, rnnt WER) of greedy decoding over ``utterances``."""
    if not utterances:
        raise ContractError("empty evaluation split")
    refs, ctc_hyps, rnnt_hyps = [], [], []
    for u in utterances:
        c, r = decode_both(model, u.features, max_symbols_per_frame)
        refs.append(u.targets)
        ctc_hyps.append(c.symbols)
        rnnt_hyps.append(r.symbols)
    return wer(refs, ctc_hyps), wer(refs, rnnt_hyps)


def evaluate_matrix_row(model: hm.HybridModel, tasks: Sequence, k: int,
                        matrix: ResultsMatrix | None = None) -> dict:
    """WER on the clean and noisy test halves of tasks 1..k, both decoders.

    Returns ``{i: {channel: wer}}``; writes the cells into ``matrix`` if given.
    """
    row = {}
    for i in range(1, k + 1):
        task = tasks[i - 1]
        cell = {}
        for cond, noisy in (("clean", False), ("noisy", True)):
            ctc_w, rnnt_w = evaluate_split(model, task.test_condition(noisy))
            cell[f"ctc_{cond}"] = ctc_w
            cell[f"rnnt_{cond}"] = rnnt_w
        row[i] = cell
        if matrix is not None:
            matrix.set_cell(k, i, cell)
    return row
