"""CTC and transducer negative log-likelihoods with exact alpha-beta gradients.

Both losses take normalized log-probabilities and return the gradient with
respect to the logits that produced them (pulled back through log_softmax),
so every gradient row sums to zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import NEG_INF, ContractError, Params, log_softmax, zeros_like_params
from . import model as hm


class InfeasibleError(ValueError):
    """Too few frames for CTC to emit the target sequence."""


@dataclass
class LossResult:
    value: float
    logit_grads: np.ndarray


def ctc_min_frames(targets: Sequence[int]) -> int:
    y = list(targets)
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """Shift right by k (k > 0) or left by -k, filling with the log-zero sentinel."""
    out = np.full_like(a, NEG_INF)
    if k > 0:
        out[k:] = a[:-k]
    else:
        out[:k] = a[-k:]
    return out


def _lse(*arrs):
    out = arrs[0]
    for a in arrs[1:]:
        out = np.logaddexp(out, a)
    return out


def ctc_loss(log_probs: np.ndarray, targets: Sequence[int], blank_id: int = 0) -> LossResult:
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] == 0:
        raise ContractError(f"log_probs must be a non-empty [T, V] array, got {lp.shape}")
    T, V = lp.shape
    y = [int(s) for s in targets]
    if ctc_min_frames(y) > T:
        raise InfeasibleError(f"CTC needs {ctc_min_frames(y)} frames for {y}, have {T}")

    ext = np.full(2 * len(y) + 1, blank_id, dtype=np.int64)
    ext[1::2] = y
    S = ext.size
    # skip transition s-2 -> s allowed into labels that differ from the previous label
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = lp[:, ext]                                          # [T, S]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        jump = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[t] = _lse(prev, _shift(prev, 1), jump) + emit[t]

    # beta[t, s]: log-prob of completing the path after being in state s at frame t
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_from = np.zeros(S, dtype=bool)                        # s -> s+2 allowed
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        jump = np.where(skip_from, _shift(nxt, -2), NEG_INF)
        beta[t] = _lse(nxt, _shift(nxt, -1), jump)

    tail = [alpha[T - 1, S - 1]] + ([alpha[T - 1, S - 2]] if S > 1 else [])
    log_p = float(np.logaddexp.reduce(tail))
    occ = np.exp(alpha + beta - log_p)                        # state posteriors [T, S]
    grad_lp = np.zeros((T, V))
    for s in range(S):
        grad_lp[:, ext[s]] -= occ[:, s]
    # each frame's occupancy sums to one, so the log_softmax pullback is probs - occupancy
    logit_grads = np.exp(lp) + grad_lp
    return LossResult(value=-log_p, logit_grads=logit_grads)


def _rnnt_tables(lp: np.ndarray, y: np.ndarray, blank_id: int):
    T, U1, _ = lp.shape
    U = U1 - 1
    blank = lp[:, :, blank_id]                                 # [T, U+1]
    emit = np.full((T, U1), NEG_INF)
    if U:
        emit[:, :U] = lp[:, np.arange(U), y]                   # emit[t, u] = log p(y_{u+1} | t, u)
    return blank, emit


def _row_scan(seed_row: np.ndarray, emit_row: np.ndarray) -> np.ndarray:
    """Solve a[u] = logaddexp(seed[u], a[u-1] + e[u-1]) along u, vectorized."""
    cum = np.concatenate([[0.0], np.cumsum(emit_row[:-1])])
    return cum + np.logaddexp.accumulate(seed_row - cum)


def _row_scan_rev(seed_row: np.ndarray, emit_row: np.ndarray) -> np.ndarray:
    """Solve b[u] = logaddexp(seed[u], b[u+1] + e[u]) along u, vectorized."""
    # suffix sums: rc[u] = sum_{j>=u} e[j] for j < U
    e = emit_row[:-1]
    rc = np.concatenate([np.cumsum(e[::-1])[::-1], [0.0]])
    return np.logaddexp.accumulate((seed_row - rc)[::-1])[::-1] + rc


def rnnt_loss(node_log_probs: np.ndarray, targets: Sequence[int], blank_id: int = 0) -> LossResult:
    lp = np.asarray(node_log_probs, dtype=np.float64)
    y = np.asarray(list(targets), dtype=np.int64)
    if lp.ndim != 3 or lp.shape[0] < 1 or lp.shape[1] != y.size + 1:
        raise ContractError(f"node_log_probs must be [T>=1, {y.size + 1}, V], got {lp.shape}")
    if y.size and (np.any(y == blank_id) or y.min() < 0 or y.max() >= lp.shape[2]):
        raise hm.TargetError(f"invalid targets {y.tolist()}")
    T, U1, V = lp.shape
    blank, emit = _rnnt_tables(lp, y, blank_id)

    alpha = np.empty((T, U1))
    seed = np.full(U1, NEG_INF)
    seed[0] = 0.0
    alpha[0] = _row_scan(seed, emit[0])
    for t in range(1, T):
        alpha[t] = _row_scan(alpha[t - 1] + blank[t - 1], emit[t])
    log_p = float(alpha[T - 1, U1 - 1] + blank[T - 1, U1 - 1])

    beta = np.empty((T, U1))
    seed = np.full(U1, NEG_INF)
    seed[U1 - 1] = blank[T - 1, U1 - 1]
    beta[T - 1] = _row_scan_rev(seed, emit[T - 1])
    for t in range(T - 2, -1, -1):
        beta[t] = _row_scan_rev(beta[t + 1] + blank[t], emit[t])

    grad_lp = np.zeros_like(lp)
    nxt = np.full((T, U1), NEG_INF)
    nxt[:-1] = beta[1:]
    nxt[T - 1, U1 - 1] = 0.0
    grad_lp[:, :, blank_id] = -np.exp(alpha + blank + nxt - log_p)
    if U1 > 1:
        occ_emit = -np.exp(alpha[:, :-1] + emit[:, :-1] + beta[:, 1:] - log_p)
        t_idx = np.arange(T)[:, None]
        u_idx = np.arange(U1 - 1)[None, :]
        np.add.at(grad_lp, (t_idx, u_idx, y[None, :]), occ_emit)
    logit_grads = grad_lp - np.exp(lp) * grad_lp.sum(axis=-1, keepdims=True)
    return LossResult(value=-log_p, logit_grads=logit_grads)


# -- composite loss through the model ----------------------------------------

@dataclass
class BaseLossResult:
    value: float
    grads: Params
    rnnt: float
    ctc: float | None
    ctc_skipped: bool = False


def base_loss(model: "hm.HybridModel", features: np.ndarray, targets: Sequence[int],
              w_ctc: float = 0.3, skip_infeasible: bool = True) -> BaseLossResult:
    """(1 - w_ctc) * RNNT + w_ctc * CTC, with gradients through both heads."""
    cfg = model.config
    cache = hm.forward(model, features, targets, with_ctc=w_ctc != 0.0)
    r = rnnt_loss(log_softmax(cache.joint_logits, axis=-1), cache.targets, cfg.blank_id)
    w_rnnt = 1.0 - w_ctc
    value = w_rnnt * r.value
    d_joint = w_rnnt * r.logit_grads
    d_ctc = None
    c_value = None
    skipped = False
    if w_ctc != 0.0:
        try:
            c = ctc_loss(log_softmax(cache.ctc_logits, axis=-1), cache.targets, cfg.blank_id)
        except InfeasibleError:
            if not skip_infeasible:
                raise
            skipped = True
        else:
            c_value = c.value
            value += w_ctc * c.value
            d_ctc = w_ctc * c.logit_grads
    grads = hm.backward(model, cache, d_ctc_logits=d_ctc, d_joint_logits=d_joint)
    return BaseLossResult(value=value, grads=grads, rnnt=r.value, ctc=c_value, ctc_skipped=skipped)


def batch_base_loss(model: "hm.HybridModel", utterances, w_ctc: float = 0.3):
    """Mean base loss and mean gradient over a batch, accumulated in index order."""
    utterances = list(utterances)
    if not utterances:
        raise ContractError("empty batch")
    total = 0.0
    grads = zeros_like_params(model.params)
    for utt in utterances:
        res = base_loss(model, utt.features, utt.targets, w_ctc)
        total += res.value
        for name, g in res.grads.items():
            grads[name] += g
    n = len(utterances)
    for g in grads.values():
        g /= n
    return total / n, grads

