"""Desk-scale hybrid CTC/transducer model with hand-written backward passes.

Encoder: causal temporal conv -> ReLU -> pointwise linear -> tanh (length preserving).
Prediction network: stateless, conditions on the previous symbol only
(blank serves as the start context). Joint network: tanh fusion of encoder and
prediction vectors followed by an output projection. A separate linear CTC
head reads the same encoder output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numcore import ContractError, Params, log_softmax, make_rng, snapshot_params


class TargetError(ValueError):
    """Target sequence contains blank or an out-of-range symbol."""


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 8
    hidden_dim: int = 32
    vocab_size: int = 13
    conv_kernel: int = 3
    blank_id: int = 0

    def __post_init__(self):
        if min(self.feat_dim, self.hidden_dim, self.vocab_size, self.conv_kernel) < 1:
            raise ContractError("model dimensions must be >= 1")
        if self.conv_kernel % 2 != 1:
            raise ContractError("conv_kernel must be odd")
        if self.blank_id != 0 or self.vocab_size < 2:
            raise ContractError("blank_id is fixed to 0 and vocab_size must be >= 2")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """Name -> (shape, fan_in) in canonical order."""
    F, H, V, k = cfg.feat_dim, cfg.hidden_dim, cfg.vocab_size, cfg.conv_kernel
    return {
        "encoder.conv.weight": ((H, F, k), F * k),
        "encoder.conv.bias": ((H,), F * k),
        "encoder.pointwise.weight": ((H, H), H),
        "encoder.pointwise.bias": ((H,), H),
        "predictor.embedding": ((V, H), H),
        "predictor.proj.weight": ((H, H), H),
        "predictor.proj.bias": ((H,), H),
        "joint.enc.weight": ((H, H), H),
        "joint.pred.weight": ((H, H), H),
        "joint.bias": ((H,), 2 * H),
        "joint.out.weight": ((V, H), H),
        "joint.out.bias": ((V,), H),
        "ctc.weight": ((V, H), H),
        "ctc.bias": ((V,), H),
    }


@dataclass
class HybridModel:
    config: ModelConfig
    params: Params

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(self.params) != list(shapes):
            raise ContractError(f"parameter names {list(self.params)} do not match config")
        for name, (shape, _) in shapes.items():
            if self.params[name].shape != shape:
                raise ContractError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def with_params(self, params: Params) -> "HybridModel":
        return HybridModel(self.config, params)

    def copy(self) -> "HybridModel":
        return HybridModel(self.config, snapshot_params(self.params))


def init_model(config: ModelConfig, seed: int) -> HybridModel:
    rng = make_rng(seed, "model-init")
    params = {}
    for name, (shape, fan_in) in param_shapes(config).items():
        s = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-s, s, size=shape)
    return HybridModel(config, params)


def zero_model(config: ModelConfig) -> HybridModel:
    return HybridModel(config, {n: np.zeros(s) for n, (s, _) in param_shapes(config).items()})


def snapshot(model: HybridModel) -> Params:
    return snapshot_params(model.params)


def check_targets(targets: Sequence[int], vocab_size: int, blank_id: int = 0) -> np.ndarray:
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    if y.size and (np.any(y == blank_id) or y.min() < 0 or y.max() >= vocab_size):
        raise TargetError(f"targets must lie in [1, {vocab_size - 1}], got {y.tolist()}")
    return y


# -- forward ----------------------------------------------------------------

@dataclass
class ForwardCache:
    windows: np.ndarray          # [T, k, F] causal input windows
    conv_pre: np.ndarray         # [T, H]
    conv_act: np.ndarray         # [T, H]
    enc: np.ndarray              # [T, H]
    targets: Optional[np.ndarray] = None
    contexts: Optional[np.ndarray] = None   # [U+1] symbol ids fed to the predictor
    pred: Optional[np.ndarray] = None       # [U+1, H]
    joint_hidden: Optional[np.ndarray] = None  # [T, U+1, H]
    joint_logits: Optional[np.ndarray] = None  # [T, U+1, V]
    ctc_logits: Optional[np.ndarray] = None    # [T, V]


def _encode(params: Params, cfg: ModelConfig, features: np.ndarray):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.feat_dim:
        raise ContractError(f"features must be [T, {cfg.feat_dim}], got {x.shape}")
    T = x.shape[0]
    if T < 1:
        raise ContractError("need at least one frame")
    k = cfg.conv_kernel
    padded = np.concatenate([np.zeros((k - 1, cfg.feat_dim)), x], axis=0)
    idx = np.arange(T)[:, None] + np.arange(k)[None, :]
    windows = padded[idx]                                   # [T, k, F]
    pre = np.einsum("tkf,hfk->th", windows, params["encoder.conv.weight"]) + params["encoder.conv.bias"]
    act = np.maximum(pre, 0.0)
    enc = np.tanh(act @ params["encoder.pointwise.weight"].T + params["encoder.pointwise.bias"])
    return ForwardCache(windows=windows, conv_pre=pre, conv_act=act, enc=enc)


def encode(model: HybridModel, features: np.ndarray) -> np.ndarray:
    return _encode(model.params, model.config, features).enc


def ctc_logits(model: HybridModel, encoded: np.ndarray) -> np.ndarray:
    p = model.params
    return encoded @ p["ctc.weight"].T + p["ctc.bias"]


def ctc_log_probs(model: HybridModel, encoded: np.ndarray) -> np.ndarray:
    return log_softmax(ctc_logits(model, encoded), axis=-1)


def predictor(model: HybridModel, contexts: np.ndarray) -> np.ndarray:
    p = model.params
    emb = p["predictor.embedding"][contexts]
    return np.tanh(emb @ p["predictor.proj.weight"].T + p["predictor.proj.bias"])


def _joint(params: Params, enc: np.ndarray, pred: np.ndarray):
    a = enc @ params["joint.enc.weight"].T                  # [T, H]
    b = pred @ params["joint.pred.weight"].T                # [U+1, H]
    hidden = np.tanh(a[:, None, :] + b[None, :, :] + params["joint.bias"])
    logits = hidden @ params["joint.out.weight"].T + params["joint.out.bias"]
    return hidden, logits


def joint_logits(model: HybridModel, encoded: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    y = check_targets(targets, model.config.vocab_size, model.config.blank_id)
    contexts = np.concatenate([[model.config.blank_id], y]).astype(np.int64)
    return _joint(model.params, encoded, predictor(model, contexts))[1]


def joint_log_probs(model: HybridModel, encoded: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """[T, U+1, V] log-distributions at every transducer lattice node."""
    return log_softmax(joint_logits(model, encoded, targets), axis=-1)


def joint_step(model: HybridModel, enc_t: np.ndarray, context: int) -> np.ndarray:
    """Joint logits for one frame vector and one previous symbol."""
    p = model.params
    pred = predictor(model, np.array([context]))[0]
    hidden = np.tanh(p["joint.enc.weight"] @ enc_t + p["joint.pred.weight"] @ pred + p["joint.bias"])
    return p["joint.out.weight"] @ hidden + p["joint.out.bias"]


def forward(model: HybridModel, features: np.ndarray, targets: Sequence[int],
            with_ctc: bool = True, with_joint: bool = True) -> ForwardCache:
    """Full forward pass keeping everything the backward pass needs."""
    cfg, p = model.config, model.params
    cache = _encode(p, cfg, features)
    if with_ctc:
        cache.ctc_logits = cache.enc @ p["ctc.weight"].T + p["ctc.bias"]
    if with_joint:
        y = check_targets(targets, cfg.vocab_size, cfg.blank_id)
        cache.targets = y
        cache.contexts = np.concatenate([[cfg.blank_id], y]).astype(np.int64)
        cache.pred = predictor(model, cache.contexts)
        cache.joint_hidden, cache.joint_logits = _joint(p, cache.enc, cache.pred)
    return cache


# -- backward ---------------------------------------------------------------

def backward(model: HybridModel, cache: ForwardCache,
             d_ctc_logits: Optional[np.ndarray] = None,
             d_joint_logits: Optional[np.ndarray] = None) -> Params:
    """Parameter gradients given upstream gradients on the two heads' logits."""
    p = model.params
    grads = {name: np.zeros_like(value) for name, value in p.items()}
    d_enc = np.zeros_like(cache.enc)

    if d_ctc_logits is not None:
        grads["ctc.weight"] += d_ctc_logits.T @ cache.enc
        grads["ctc.bias"] += d_ctc_logits.sum(axis=0)
        d_enc += d_ctc_logits @ p["ctc.weight"]

    if d_joint_logits is not None:
        hidden = cache.joint_hidden
        grads["joint.out.weight"] += np.einsum("tuv,tuh->vh", d_joint_logits, hidden)
        grads["joint.out.bias"] += d_joint_logits.sum(axis=(0, 1))
        d_pre = (d_joint_logits @ p["joint.out.weight"]) * (1.0 - hidden * hidden)
        grads["joint.bias"] += d_pre.sum(axis=(0, 1))
        d_a = d_pre.sum(axis=1)                               # [T, H]
        d_b = d_pre.sum(axis=0)                               # [U+1, H]
        grads["joint.enc.weight"] += d_a.T @ cache.enc
        d_enc += d_a @ p["joint.enc.weight"]
        grads["joint.pred.weight"] += d_b.T @ cache.pred
        d_q = (d_b @ p["joint.pred.weight"]) * (1.0 - cache.pred * cache.pred)
        emb = p["predictor.embedding"][cache.contexts]
        grads["predictor.proj.weight"] += d_q.T @ emb
        grads["predictor.proj.bias"] += d_q.sum(axis=0)
        np.add.at(grads["predictor.embedding"], cache.contexts, d_q @ p["predictor.proj.weight"])

    d_pw = d_enc * (1.0 - cache.enc * cache.enc)
    grads["encoder.pointwise.weight"] += d_pw.T @ cache.conv_act
    grads["encoder.pointwise.bias"] += d_pw.sum(axis=0)
    d_pre = (d_pw @ p["encoder.pointwise.weight"]) * (cache.conv_pre > 0)
    grads["encoder.conv.weight"] += np.einsum("th,tkf->hfk", d_pre, cache.windows)
    grads["encoder.conv.bias"] += d_pre.sum(axis=0)
    return grads
