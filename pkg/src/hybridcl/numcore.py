"""Numeric substrate: log-space reductions, Adam, seeded streams, gradient checking.

Tensors are plain float64 numpy arrays; a parameter store is an ordered
``dict[str, np.ndarray]``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Sequence

import numpy as np

# Stand-in for log(0). Keeps DP recursions branch-free; absorbing under log_sum_exp.
NEG_INF = -1e30

Params = Dict[str, np.ndarray]


class ContractError(ValueError):
    """A precondition of a numeric operation was violated."""


class NonFiniteError(ArithmeticError):
    """A function evaluated during gradient checking returned a non-finite value."""

    def __init__(self, name: str, index: tuple, value: float):
        super().__init__(f"non-finite value {value!r} at {name}{list(index)}")
        self.name = name
        self.index = index
        self.value = value


def log_sum_exp(values: Iterable[float]) -> float:
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ContractError("log_sum_exp of an empty sequence")
    m = float(vals.max())
    if m <= NEG_INF:
        return m
    return m + math.log(float(np.exp(vals - m).sum()))


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not -logits.ndim <= axis < logits.ndim:
        raise ContractError(f"axis {axis} invalid for shape {logits.shape}")
    m = logits.max(axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax_backward(grad_out: np.ndarray, log_probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Pull a gradient w.r.t. log-probabilities back to the logits."""
    return grad_out - np.exp(log_probs) * grad_out.sum(axis=axis, keepdims=True)


# -- parameter stores -------------------------------------------------------

def snapshot_params(params: Params) -> Params:
    return {name: np.array(value, dtype=np.float64, copy=True) for name, value in params.items()}


def zeros_like_params(params: Params) -> Params:
    return {name: np.zeros_like(value) for name, value in params.items()}


def check_matching(a: Params, b: Params, what: str = "gradients") -> None:
    if list(a) != list(b):
        raise ContractError(f"{what} keys {list(b)} do not match parameters {list(a)}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise ContractError(f"{what} shape {b[name].shape} != {a[name].shape} for {name!r}")


def add_scaled(acc: Params, other: Params, scale: float = 1.0) -> Params:
    """In-place ``acc += scale * other``; returns ``acc``."""
    for name, value in other.items():
        acc[name] += scale * value
    return acc


def params_equal(a: Params, b: Params) -> bool:
    return list(a) == list(b) and all(np.array_equal(a[n], b[n]) for n in a)


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(lr=lr, m=zeros_like_params(params), v=zeros_like_params(params), **kw)


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update. Mutates and returns ``params`` and ``state``."""
    check_matching(params, grads)
    if not state.m:
        state.m = zeros_like_params(params)
        state.v = zeros_like_params(params)
    check_matching(params, state.m, "adam moments")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- seeded streams ---------------------------------------------------------

def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ContractError("stream keys must be non-negative")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for the named substream ``(seed, *keys)``.

    Substreams with different keys never share state, so adding draws to one
    stream leaves every other stream untouched.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


# -- finite differences -----------------------------------------------------

def finite_diff_gradient(f: Callable[[Params], float], params: Params, h: float = 1e-5) -> Params:
    """Central-difference gradient of scalar ``f`` at ``params``, one coordinate at a time."""
    if not h > 0:
        raise ContractError("step h must be positive")
    work = snapshot_params(params)
    out = zeros_like_params(params)
    for name, value in work.items():
        flat = value.reshape(-1)
        gflat = out[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(work)
            flat[j] = orig - h
            fm = f(work)
            flat[j] = orig
            for fv in (fp, fm):
                if not math.isfinite(fv):
                    raise NonFiniteError(name, np.unravel_index(j, value.shape), fv)
            gflat[j] = (fp - fm) / (2.0 * h)
    return out


def max_relative_error(analytic: Params, numeric: Params, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)`` across all tensors."""
    worst = 0.0
    for name in numeric:
        a = np.asarray(analytic[name], dtype=np.float64)
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
