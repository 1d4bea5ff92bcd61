from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridcl import strategies as cl
from hybridcl.losses import base_loss
from hybridcl.model import init_model
from hybridcl.numcore import ContractError, finite_diff_gradient, make_rng, max_relative_error, params_equal
from hybridcl.strategies import (CLHyper, CLState, ConfigError, end_of_task_update, ewc_consolidate,
                                 ewc_estimate_fisher, ewc_penalty, lwf_distill_loss, mas_estimate_importance,
                                 mas_penalty, total_loss)
from hybridcl.training import train_task


def scalar_state(method, theta_star, weight, **hyper):
    return CLState(method, CLHyper(**hyper), anchor={"w": np.array([theta_star])},
                   importance={"w": np.array([weight])}, tasks_seen=1)


def test_hyper_validation():
    with pytest.raises(ConfigError):
        CLHyper(alpha_kd=1.5).validate()
    with pytest.raises(ConfigError):
        CLHyper(lambda_ewc=-1).validate()
    with pytest.raises(ConfigError):
        CLHyper(distill_kind="js").validate()
    with pytest.raises(ConfigError):
        CLState("replay")


def _fake_fisher(monkeypatch, grads):
    it = iter(grads)
    monkeypatch.setattr(cl, "base_loss",
                        lambda *a, **k: SimpleNamespace(grads={"w": np.array([next(it)])}))
    fake_model = SimpleNamespace(params={"w": np.zeros(1)})
    utt = SimpleNamespace(features=None, targets=())
    return ewc_estimate_fisher(fake_model, [utt] * len(grads))["w"][0]


def test_fisher_toy_examples(monkeypatch):
    assert _fake_fisher(monkeypatch, [2.0, 2.0, 2.0]) == 4.0
    assert _fake_fisher(monkeypatch, [0.0, 0.0]) == 0.0
    assert _fake_fisher(monkeypatch, [1.0, 3.0]) == 5.0


def test_fisher_empty_dataset(tiny_model):
    with pytest.raises(ContractError):
        ewc_estimate_fisher(tiny_model, [])
    with pytest.raises(ContractError):
        mas_estimate_importance(tiny_model, [])


def test_consolidation_examples():
    prev, new = {"w": np.array([4.0])}, {"w": np.array([1.0])}
    assert ewc_consolidate(prev, new, 1.0)["w"][0] == 5.0
    assert ewc_consolidate(prev, new, 0.0)["w"][0] == 1.0
    assert ewc_consolidate(None, new, 1.0)["w"][0] == 1.0
    with pytest.raises(ContractError):
        ewc_consolidate({"w": np.zeros(2)}, new, 1.0)


def test_ewc_penalty_examples():
    state = scalar_state("ewc", 0.0, 2.0, lambda_ewc=10.0)
    value, grads = ewc_penalty({"w": np.array([0.5])}, state)
    assert value == pytest.approx(5.0) and grads["w"][0] == pytest.approx(20.0)
    value, grads = ewc_penalty({"w": np.array([0.0])}, state)
    assert value == 0.0 and grads["w"][0] == 0.0
    with pytest.raises(ContractError):
        ewc_penalty({"w": np.zeros(1)}, CLState("ewc"))


def test_mas_penalty_examples():
    state = scalar_state("mas", 1.0, 3.0, lambda_mas=1.0)
    value, grads = mas_penalty({"w": np.array([3.0])}, state)
    assert value == pytest.approx(12.0) and grads["w"][0] == pytest.approx(12.0)
    assert mas_penalty({"w": np.array([1.0])}, state)[0] == 0.0
    with pytest.raises(ContractError):
        mas_penalty({"w": np.zeros(1)}, CLState("mas"))


def test_mas_linear_toy(monkeypatch):
    w, x = 2.0, 3.0
    monkeypatch.setattr(cl.hm, "forward", lambda m, f, y, with_ctc, with_joint: SimpleNamespace(
        ctc_logits=np.array([[w * x]]), joint_logits=None))
    monkeypatch.setattr(cl.hm, "backward", lambda m, cache, d_ctc, d_joint: {"w": np.array([d_ctc.sum() * x])})
    fake = SimpleNamespace(params={"w": np.array([w])}, features=None, targets=())
    omega = mas_estimate_importance(fake, [fake], alpha_ctx=1.0)
    assert omega["w"][0] == pytest.approx(36.0)


def _utts(cfg, n, seed):
    from conftest import random_utterance
    rng = np.random.default_rng(seed)
    return [random_utterance(rng, cfg) for _ in range(n)]


def test_mas_ctc_only_leaves_transducer_params_unimportant(tiny_model):
    omega = mas_estimate_importance(tiny_model, _utts(tiny_model.config, 4, 0), alpha_ctx=1.0)
    for name in omega:
        if name.startswith(("predictor.", "joint.")):
            assert np.all(omega[name] == 0.0), name
    assert np.any(omega["ctc.weight"] > 0)


def test_mas_duplicate_batches_same_importance(tiny_model):
    utts = _utts(tiny_model.config, 4, 1)
    one = mas_estimate_importance(tiny_model, utts, batch_size=4)
    two = mas_estimate_importance(tiny_model, utts + utts, batch_size=4)
    for n in one:
        np.testing.assert_allclose(two[n], one[n], rtol=1e-14, atol=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 5.0), st.sampled_from(["ewc", "mas"]))
def test_penalty_gradient_matches_finite_differences(seed, strength, method):
    rng = np.random.default_rng(seed)
    params = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    anchor = {n: v + rng.normal(size=v.shape) for n, v in params.items()}
    weights = {n: rng.uniform(0, 2, size=v.shape) for n, v in params.items()}
    key = "lambda_ewc" if method == "ewc" else "lambda_mas"
    state = CLState(method, CLHyper(**{key: strength}), anchor=anchor, importance=weights, tasks_seen=1)
    fn = ewc_penalty if method == "ewc" else mas_penalty
    value, grads = fn(params, state)
    assert value >= 0
    numeric = finite_diff_gradient(lambda p: fn(p, state)[0], params)
    assert max_relative_error(grads, numeric, 1e-5) < 1e-6
    assert fn(anchor, state)[0] == 0.0


def test_importance_nonnegative_after_updates(tiny_model):
    utts = _utts(tiny_model.config, 3, 2)
    for method in ("ewc", "mas"):
        state = CLState(method)
        for _ in range(2):
            state = end_of_task_update(method, tiny_model, utts, state)
            assert all(np.all(v >= 0) for v in state.importance.values())


def test_kl_distillation_zero_on_identical_models(tiny_model):
    u = _utts(tiny_model.config, 1, 3)[0]
    value, grads = lwf_distill_loss(tiny_model, tiny_model.copy(), u, 0.3, "kl")
    assert abs(value) < 1e-15
    assert all(np.max(np.abs(g)) < 1e-15 for g in grads.values())
    other = init_model(tiny_model.config, 99)
    assert lwf_distill_loss(tiny_model, other, u, 0.3, "kl")[0] > 0
    assert lwf_distill_loss(tiny_model, other, u, 0.3, "mse")[0] > 0
    with pytest.raises(ContractError):
        lwf_distill_loss(tiny_model, None, u)


def test_lwf_alpha_ctx_zero_is_pure_transducer_term(tiny_model):
    u = _utts(tiny_model.config, 1, 4)[0]
    other = init_model(tiny_model.config, 5)
    v0, _ = lwf_distill_loss(tiny_model, other, u, 0.0)
    v_half, _ = lwf_distill_loss(tiny_model, other, u, 0.5)
    v1, _ = lwf_distill_loss(tiny_model, other, u, 1.0)
    assert v_half == pytest.approx(0.5 * v0 + 0.5 * v1, rel=1e-12)


@pytest.mark.parametrize("kind", ["kl", "mse"])
def test_lwf_gradient(tiny_model, kind):
    u = _utts(tiny_model.config, 1, 6)[0]
    teacher = init_model(tiny_model.config, 8)
    _, analytic = lwf_distill_loss(tiny_model, teacher, u, 0.3, kind)
    numeric = finite_diff_gradient(
        lambda p: lwf_distill_loss(tiny_model.with_params(p), teacher, u, 0.3, kind)[0], tiny_model.params)
    assert max_relative_error(analytic, numeric, 1e-5) < 1e-4


@pytest.mark.parametrize("method", cl.METHODS)
def test_first_task_total_loss_is_base_loss(tiny_model, method):
    utts = _utts(tiny_model.config, 3, 7)
    value, grads = total_loss(method, tiny_model, utts, CLState(method))
    ref = [base_loss(tiny_model, u.features, u.targets) for u in utts]
    assert value == sum(r.value for r in ref) / 3
    for n in grads:
        np.testing.assert_array_equal(grads[n], sum(r.grads[n] for r in ref) / 3)


def test_lwf_without_distillation_weight_is_base_loss(tiny_model):
    utts = _utts(tiny_model.config, 2, 8)
    state = CLState("lwf", CLHyper(alpha_kd=0.0), frozen=init_model(tiny_model.config, 3), tasks_seen=1)
    value, grads = total_loss("lwf", tiny_model, utts, state)
    ref_value, ref_grads = total_loss("naive", tiny_model, utts, CLState("naive"))
    assert value == ref_value
    assert params_equal(grads, ref_grads)


def test_total_loss_errors(tiny_model):
    with pytest.raises(ConfigError):
        total_loss("replay", tiny_model, _utts(tiny_model.config, 1, 0), CLState("naive"))
    with pytest.raises(ContractError):
        total_loss("naive", tiny_model, [], CLState("naive"))
    with pytest.raises(ConfigError):
        end_of_task_update("ewc", tiny_model, [], CLState("naive"))


def test_end_of_task_update_contents(tiny_model):
    utts = _utts(tiny_model.config, 3, 9)
    naive = end_of_task_update("naive", tiny_model, utts, CLState("naive"))
    assert naive.anchor is not None and naive.importance is None and naive.frozen is None
    assert params_equal(naive.anchor, tiny_model.params)

    s1 = end_of_task_update("ewc", tiny_model, utts[:2], CLState("ewc"))
    s2 = end_of_task_update("ewc", tiny_model, utts[2:], s1)
    f1, f2 = ewc_estimate_fisher(tiny_model, utts[:2]), ewc_estimate_fisher(tiny_model, utts[2:])
    for n in f1:
        np.testing.assert_array_equal(s2.importance[n], f1[n] + f2[n])

    lwf = end_of_task_update("lwf", tiny_model, utts, CLState("lwf"))
    from hybridcl.model import encode, ctc_log_probs
    x = utts[0].features
    np.testing.assert_array_equal(ctc_log_probs(lwf.frozen, encode(lwf.frozen, x)),
                                  ctc_log_probs(tiny_model, encode(tiny_model, x)))
    assert lwf.frozen.params["ctc.weight"] is not tiny_model.params["ctc.weight"]


def _trajectory(method, hyper, cfg, tasks):
    model = init_model(cfg, 0)
    state = CLState(method, hyper)
    for t, data in enumerate(tasks):
        train_task(model, data, state, epochs=2, lr=1e-2, batch_size=2, w_ctc=0.3,
                   shuffle_rng=make_rng(0, "shuffle", t))
        state = end_of_task_update(method, model, data, state)
    return model.params


def test_zero_strength_trajectories_match_naive(tiny_config):
    tasks = [_utts(tiny_config, 4, 10), _utts(tiny_config, 4, 11)]
    ref = _trajectory("naive", CLHyper(), tiny_config, tasks)
    for method, hyper in (("ewc", CLHyper(lambda_ewc=0.0)), ("mas", CLHyper(lambda_mas=0.0)),
                          ("lwf", CLHyper(alpha_kd=0.0))):
        assert params_equal(_trajectory(method, hyper, tiny_config, tasks), ref), method
