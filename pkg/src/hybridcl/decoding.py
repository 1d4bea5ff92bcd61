"""Greedy decoders for the CTC and transducer heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as hm
from .numcore import ContractError


@dataclass(frozen=True)
class Hypothesis:
    symbols: tuple
    path: str


def ctc_greedy_decode(log_probs: np.ndarray, blank_id: int = 0) -> Hypothesis:
    """Best path: per-frame argmax, merge repeats, drop blanks."""
    lp = np.asarray(log_probs)
    if lp.ndim != 2:
        raise ContractError(f"log_probs must be [T, V], got {lp.shape}")
    best = np.argmax(lp, axis=1)  # ties go to the lowest index
    out = []
    prev = None
    for s in best.tolist():
        if s != prev and s != blank_id:
            out.append(s)
        prev = s
    return Hypothesis(tuple(out), "ctc")


def rnnt_greedy_decode(model: hm.HybridModel, encoded: np.ndarray, max_symbols_per_frame: int = 10) -> Hypothesis:
    if max_symbols_per_frame < 1:
        raise ContractError("max_symbols_per_frame must be >= 1")
    blank = model.config.blank_id
    context = blank
    out = []
    for enc_t in encoded:
        for _ in range(max_symbols_per_frame):
            sym = int(np.argmax(hm.joint_step(model, enc_t, context)))
            if sym == blank:
                break
            out.append(sym)
            context = sym
    return Hypothesis(tuple(out), "rnnt")


def decode_both(model: hm.HybridModel, features: np.ndarray, max_symbols_per_frame: int = 10):
    enc = hm.encode(model, features)
    ctc = ctc_greedy_decode(hm.ctc_logits(model, enc), model.config.blank_id)
    return ctc, rnnt_greedy_decode(model, enc, max_symbols_per_frame)
