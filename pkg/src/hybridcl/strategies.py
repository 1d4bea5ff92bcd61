"""Sequential-training strategies: naive fine-tuning, EWC, MAS and LwF."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import model as hm
from .losses import base_loss
from .numcore import ContractError, Params, add_scaled, check_matching, log_softmax, zeros_like_params

METHODS = ("naive", "ewc", "mas", "lwf")
DISTILL_KINDS = ("kl", "mse")


class ConfigError(ValueError):
    """Invalid method name or hyperparameter."""


@dataclass(frozen=True)
class CLHyper:
    lambda_ewc: float = 10.0
    gamma: float = 1.0
    lambda_mas: float = 1.0
    # Mixes RNNT vs CTC terms, both for MAS logit norms and for LwF distillation.
    alpha_ctx: float = 0.3
    alpha_kd: float = 0.1
    distill_kind: str = "kl"

    def validate(self) -> "CLHyper":
        for name in ("alpha_ctx", "alpha_kd"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("lambda_ewc", "lambda_mas", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.distill_kind not in DISTILL_KINDS:
            raise ConfigError(f"distill_kind must be one of {DISTILL_KINDS}")
        return self


@dataclass
class CLState:
    method: str
    hyper: CLHyper = field(default_factory=CLHyper)
    anchor: Optional[Params] = None
    importance: Optional[Params] = None
    frozen: Optional[hm.HybridModel] = None
    tasks_seen: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        self.hyper.validate()


# -- EWC --------------------------------------------------------------------

def ewc_estimate_fisher(model: hm.HybridModel, utterances: Sequence, w_ctc: float = 0.3) -> Params:
    """Diagonal Fisher: mean of squared per-utterance base-loss gradients."""
    utterances = list(utterances)
    if not utterances:
        raise ContractError("cannot estimate Fisher information on an empty dataset")
    fisher = zeros_like_params(model.params)
    for utt in utterances:
        grads = base_loss(model, utt.features, utt.targets, w_ctc).grads
        for name, g in grads.items():
            fisher[name] += g * g
    for f in fisher.values():
        f /= len(utterances)
    return fisher


def ewc_consolidate(previous: Optional[Params], current: Params, gamma: float) -> Params:
    if previous is None:
        return {n: v.copy() for n, v in current.items()}
    check_matching(previous, current, "Fisher")
    return {n: gamma * previous[n] + current[n] for n in previous}


def quadratic_penalty(params: Params, anchor: Params, weights: Params, strength: float):
    """strength * sum_j w_j (theta_j - anchor_j)^2 and its gradient."""
    check_matching(params, anchor, "anchor")
    check_matching(params, weights, "importance")
    value = 0.0
    grads = {}
    for name, theta in params.items():
        diff = theta - anchor[name]
        value += float(np.sum(weights[name] * diff * diff))
        grads[name] = 2.0 * strength * weights[name] * diff
    return strength * value, grads


def ewc_penalty(params: Params, state: CLState):
    if state.anchor is None or state.importance is None:
        raise ContractError("EWC penalty needs an anchor and a consolidated Fisher")
    return quadratic_penalty(params, state.anchor, state.importance, state.hyper.lambda_ewc)


# -- MAS --------------------------------------------------------------------

def mas_estimate_importance(model: hm.HybridModel, utterances: Sequence, alpha_ctx: float = 0.3,
                            batch_size: int = 8) -> Params:
    """Per-parameter sensitivity of the squared logit norms, averaged over batches.

    For each batch the objective is
    ``(1 - alpha_ctx) * mean_b |z_joint|^2 + alpha_ctx * mean_b |z_ctc|^2``;
    the absolute value of its gradient is accumulated and the sum divided by
    the number of batches.
    """
    utterances = list(utterances)
    if not utterances:
        raise ContractError("cannot estimate MAS importance on an empty dataset")
    omega = zeros_like_params(model.params)
    batches = [utterances[i:i + batch_size] for i in range(0, len(utterances), batch_size)]
    for batch in batches:
        grads = zeros_like_params(model.params)
        scale = 1.0 / len(batch)
        for utt in batch:
            cache = hm.forward(model, utt.features, utt.targets,
                               with_ctc=alpha_ctx != 0.0, with_joint=alpha_ctx != 1.0)
            d_ctc = None if cache.ctc_logits is None else 2.0 * alpha_ctx * scale * cache.ctc_logits
            d_joint = None if cache.joint_logits is None else 2.0 * (1.0 - alpha_ctx) * scale * cache.joint_logits
            add_scaled(grads, hm.backward(model, cache, d_ctc, d_joint))
        for name, g in grads.items():
            omega[name] += np.abs(g)
    for o in omega.values():
        o /= len(batches)
    return omega


def mas_penalty(params: Params, state: CLState):
    if state.anchor is None or state.importance is None:
        raise ContractError("MAS penalty needs an anchor and importance weights")
    return quadratic_penalty(params, state.anchor, state.importance, state.hyper.lambda_mas)


# -- LwF --------------------------------------------------------------------

def _kl_rows(teacher_logits: np.ndarray, student_logits: np.ndarray):
    """Mean over rows of KL(teacher || student) and its gradient w.r.t. student logits."""
    lp_t = log_softmax(teacher_logits, axis=-1)
    lp_s = log_softmax(student_logits, axis=-1)
    p_t = np.exp(lp_t)
    rows = int(np.prod(teacher_logits.shape[:-1]))
    value = float(np.sum(p_t * (lp_t - lp_s))) / rows
    return value, (np.exp(lp_s) - p_t) / rows


def _mse(teacher_logits: np.ndarray, student_logits: np.ndarray):
    diff = student_logits - teacher_logits
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def lwf_distill_loss(model: hm.HybridModel, frozen: Optional[hm.HybridModel], utterance,
                     alpha_ctx: float = 0.3, distill_kind: str = "kl"):
    """(1 - alpha_ctx) * transducer-node term + alpha_ctx * CTC-frame term.

    Gradients flow only into ``model``; the frozen teacher sees the same
    utterance and the same target contexts.
    """
    if frozen is None:
        raise ContractError("LwF distillation needs a frozen previous-task model")
    if distill_kind not in DISTILL_KINDS:
        raise ConfigError(f"distill_kind must be one of {DISTILL_KINDS}")
    term = _kl_rows if distill_kind == "kl" else _mse
    use_ctc, use_joint = alpha_ctx != 0.0, alpha_ctx != 1.0
    cur = hm.forward(model, utterance.features, utterance.targets, with_ctc=use_ctc, with_joint=use_joint)
    old = hm.forward(frozen, utterance.features, utterance.targets, with_ctc=use_ctc, with_joint=use_joint)
    value = 0.0
    d_ctc = d_joint = None
    if use_joint:
        v, g = term(old.joint_logits, cur.joint_logits)
        value += (1.0 - alpha_ctx) * v
        d_joint = (1.0 - alpha_ctx) * g
    if use_ctc:
        v, g = term(old.ctc_logits, cur.ctc_logits)
        value += alpha_ctx * v
        d_ctc = alpha_ctx * g
    return value, hm.backward(model, cur, d_ctc, d_joint)


# -- composition ------------------------------------------------------------

def total_loss(method: str, model: hm.HybridModel, batch: Sequence, state: CLState, w_ctc: float = 0.3):
    """Mean training objective over ``batch`` for ``method`` and its gradient."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    batch = list(batch)
    if not batch:
        raise ContractError("empty batch")
    first_task = state.tasks_seen == 0
    hyper = state.hyper
    use_kd = method == "lwf" and not first_task and hyper.alpha_kd != 0.0

    n = len(batch)
    value = 0.0
    grads = zeros_like_params(model.params)
    for utt in batch:
        res = base_loss(model, utt.features, utt.targets, w_ctc)
        if use_kd:
            d_val, d_grads = lwf_distill_loss(model, state.frozen, utt, hyper.alpha_ctx, hyper.distill_kind)
            value += (1.0 - hyper.alpha_kd) * res.value + hyper.alpha_kd * d_val
            add_scaled(grads, res.grads, 1.0 - hyper.alpha_kd)
            add_scaled(grads, d_grads, hyper.alpha_kd)
        else:
            value += res.value
            add_scaled(grads, res.grads)
    value /= n
    for g in grads.values():
        g /= n

    if not first_task and method in ("ewc", "mas"):
        pen_value, pen_grads = (ewc_penalty if method == "ewc" else mas_penalty)(model.params, state)
        value += pen_value
        add_scaled(grads, pen_grads)
    return value, grads


def end_of_task_update(method: str, model: hm.HybridModel, utterances: Sequence, state: CLState,
                       w_ctc: float = 0.3, batch_size: int = 8) -> CLState:
    """Carry knowledge of the task just finished into a new CLState."""
    if method != state.method:
        raise ConfigError(f"state belongs to {state.method!r}, not {method!r}")
    new = replace(state, anchor=hm.snapshot(model), tasks_seen=state.tasks_seen + 1)
    if method == "ewc":
        fisher = ewc_estimate_fisher(model, utterances, w_ctc)
        new.importance = ewc_consolidate(state.importance, fisher, state.hyper.gamma)
    elif method == "mas":
        omega = mas_estimate_importance(model, utterances, state.hyper.alpha_ctx, batch_size)
        if state.importance is not None:
            omega = {n: state.importance[n] + omega[n] for n in omega}
        new.importance = omega
    elif method == "lwf":
        new.frozen = model.copy()
    return new
