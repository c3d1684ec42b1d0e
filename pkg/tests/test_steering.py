import math

import numpy as np
import pytest

import oracles
from msrs.steering import (
    PARAM_NAMES,
    Example,
    Item,
    LossBreakdown,
    StateCache,
    SteeringModule,
    TrainConfig,
    TrainingDiverged,
    build_prior_mask,
    edit,
    init_steering,
    intervene,
    loss_align,
    loss_reg,
    mask_weights,
    objective,
    param_vars,
    task_loss,
    train,
)
from msrs.subspace import AlignedSubspace, Block
from msrs.tensorcore import Tape, backward, grad_check
from msrs.toymodel import ModelConfig, init_model


def aligned_233(d=16, seed=0):
    q = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, 8)))[0].T
    layout = (Block("shared", None, 0, 2), Block("private", "A", 2, 3), Block("private", "B", 5, 3))
    return AlignedSubspace(q, layout)


def module_with(aligned, granularity="attribute", **over):
    m = init_steering(aligned, granularity, seed=1)
    params = dict(m.params)
    params.update(over)
    return SteeringModule(params, aligned, granularity)


# ---------------------------------------------------------------------------
# Mask network


def test_zero_mlp_gives_half():
    al = aligned_233()
    m = module_with(al, "rank", mask_w1=np.zeros((16, 8)))
    assert np.array_equal(mask_weights(m, np.ones(16)), np.full(8, 0.5))


def test_saturated_gate():
    al = aligned_233()
    b2 = np.zeros((1, 8))
    b2[0, 3] = 20.0
    m = module_with(al, "rank", mask_b2=b2)
    assert mask_weights(m, np.ones(16))[3] >= 1 - 1e-8


def test_attribute_gates_broadcast():
    al = aligned_233()
    m = module_with(al, "attribute", mask_b2=np.array([[1.0, -2.0, 3.0]]))
    a, b, c = 1 / (1 + math.exp(-1)), 1 / (1 + math.exp(2)), 1 / (1 + math.exp(-3))
    got = mask_weights(m, np.zeros(16))
    assert np.allclose(got, [a, a, b, b, b, c, c, c], rtol=0, atol=1e-15)


def test_same_space_is_ungated():
    m = module_with(aligned_233(), "same")
    assert np.array_equal(mask_weights(m, np.ones(16)), np.ones(8))


def test_module_validation():
    al = aligned_233()
    with pytest.raises(ValueError):
        init_steering(al, "blocks")
    with pytest.raises(ValueError):
        module_with(al, R=np.zeros((3, 16)))
    with pytest.raises(ValueError):
        SteeringModule(init_steering(al).params, al, lambda1=-1.0)
    with pytest.raises(ValueError):
        intervene(module_with(al), np.ones(5))


# ---------------------------------------------------------------------------
# Intervention


def test_hand_example():
    R = np.eye(4)[:2]
    al = AlignedSubspace(R, (Block("shared", None, 0, 1), Block("private", "A", 1, 1)))
    m = module_with(al, "same", R=R, W=np.zeros((2, 4)), b=np.array([[1.0, 1.0]]))
    h = np.array([3.0, 5.0, 7.0, 9.0])
    out = intervene(m, h)
    assert np.array_equal(out, [1.0, 1.0, 7.0, 9.0])
    assert np.array_equal(oracles.phi_reference(h, R, np.zeros((2, 4)), [1, 1], [1, 1]), out)


@pytest.mark.parametrize("granularity", ["same", "attribute", "rank"])
def test_intervene_matches_scalar_oracle(granularity):
    rng = np.random.default_rng(2)
    al = aligned_233()
    params = {k: rng.standard_normal(v.shape) for k, v in init_steering(al, granularity).params.items()}
    m = SteeringModule(params, al, granularity)
    h = rng.standard_normal(16)
    gate = mask_weights(m, h)
    ref = oracles.phi_reference(h, params["R"], params["W"], params["b"], gate)
    assert np.allclose(intervene(m, h), ref, rtol=0, atol=1e-12)
    assert np.allclose(edit(h, params["R"], params["W"], params["b"], gate), ref, rtol=0, atol=1e-12)


def test_fixed_point_zero_gate():
    rng = np.random.default_rng(3)
    al = aligned_233()
    for _ in range(50):
        m = module_with(al, "rank", W=rng.standard_normal((8, 16)), mask_b2=np.full((1, 8), -1000.0))
        h = rng.standard_normal(16)
        assert np.array_equal(intervene(m, h), h)


def test_fixed_point_cancellation():
    rng = np.random.default_rng(4)
    al = aligned_233()
    for g in ("same", "attribute", "rank"):
        for _ in range(20):
            R = rng.standard_normal((8, 16))
            m = module_with(al, g, R=R, W=R.copy(), b=np.zeros((1, 8)), mask_w1=rng.standard_normal((16, 8)))
            h = rng.standard_normal(16)
            assert np.array_equal(intervene(m, h), h)


def test_orthonormal_edit_components():
    rng = np.random.default_rng(5)
    al = aligned_233()
    R = al.matrix
    W, b = rng.standard_normal((8, 16)), rng.standard_normal((1, 8))
    m = module_with(al, "same", R=R, W=W, b=b)
    h = rng.standard_normal(16)
    out = intervene(m, h)
    assert np.abs(R @ out - (W @ h + b[0])).max() <= 1e-10
    P = np.eye(16) - R.T @ R
    assert np.abs(P @ out - P @ h).max() <= 1e-10


def test_intervene_rejects_non_finite():
    al = aligned_233()
    m = module_with(al, "same", W=np.full((8, 16), 1e308))
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError):
        intervene(m, np.full(16, 1e10))


# ---------------------------------------------------------------------------
# Prior mask and losses


def test_prior_masks():
    al = aligned_233()
    assert np.array_equal(build_prior_mask(al, "A").values, [1, 1, 1, 1, 1, 0, 0, 0])
    assert np.array_equal(build_prior_mask(al, "B").values, [1, 1, 0, 0, 0, 1, 1, 1])
    layout = (Block("shared", None, 0, 3), Block("private", "A", 3, 0))
    assert np.array_equal(build_prior_mask(layout, "A").values, np.ones(3))
    with pytest.raises(KeyError):
        build_prior_mask(al, "C")


def test_loss_reg():
    p = build_prior_mask(aligned_233(), "A")
    assert loss_reg(p.values, p) == 0.0
    assert loss_reg(np.full(8, 0.5), p) == 2.0
    rng = np.random.default_rng(6)
    m, q = rng.uniform(size=8), rng.integers(0, 2, 8)
    assert abs(loss_reg(m, q) - math.fsum((a - b) ** 2 for a, b in zip(m, q))) <= 1e-15
    with pytest.raises(ValueError):
        loss_reg(np.ones(3), np.ones(4))


def test_loss_align():
    S = aligned_233().matrix
    assert abs(loss_align(S, S)) <= 1e-15
    assert abs(loss_align(-S, S) - 2.0) <= 1e-15
    assert abs(loss_align(2 * S, S)) <= 1e-15
    R = np.random.default_rng(7).standard_normal(S.shape)
    assert 0.0 <= loss_align(R, S) <= 2.0
    with pytest.raises(ValueError):
        loss_align(np.zeros_like(S), S)
    with pytest.raises(ValueError):
        loss_align(S[:2], S)


def test_task_loss():
    assert abs(task_loss(np.zeros(64), 3) - math.log(64)) <= 1e-12
    z = np.zeros(64)
    z[5] = 40.0
    assert task_loss(z, 5) <= 1e-6
    z = np.random.default_rng(8).standard_normal(64) * 4
    assert abs(task_loss(z, 9) - oracles.logsumexp_ce(z, 9)) <= 1e-12
    with pytest.raises(ValueError):
        task_loss(z, 64)


def test_loss_breakdown_identity():
    lb = LossBreakdown.combine(1.25, 0.7, 0.11, 0.3, 0.5)
    assert abs(lb.total - (1.25 + 0.3 * 0.7 + 0.5 * 0.11)) <= 1e-12


# ---------------------------------------------------------------------------
# Objective and gradients


@pytest.fixture(scope="module")
def small_model():
    return init_model(ModelConfig(vocab_size=16, d_model=8, n_layers=2, n_heads=2, max_seq_len=8, seed=3))


def small_items(model, al, layer, rng, n=2):
    cache = StateCache(model, layer)
    items = []
    for i in range(n):
        toks = [int(t) for t in rng.integers(0, 16, 5)]
        attr = al.attribute_order[i % len(al.attribute_order)]
        items.append(Item(cache(toks), int(rng.integers(5)), int(rng.integers(16)), build_prior_mask(al, attr).values))
    return items


def small_aligned(seed=0):
    q = np.linalg.qr(np.random.default_rng(seed).standard_normal((8, 4)))[0].T
    return AlignedSubspace(q, (Block("shared", None, 0, 2), Block("private", "A", 2, 1), Block("private", "B", 3, 1)))


@pytest.mark.parametrize("granularity", ["same", "attribute", "rank"])
@pytest.mark.parametrize("layer", [0, 1])
def test_full_objective_gradient(small_model, granularity, layer):
    rng = np.random.default_rng(9)
    al = small_aligned()
    base = init_steering(al, granularity, seed=2, layer=layer)
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in base.params.items()}
    m = SteeringModule(params, al, granularity, 0.3, 0.5, layer)
    tape = Tape()
    pv = param_vars(tape, m)
    terms = objective(tape, small_model, m, pv, small_items(small_model, al, layer, rng))
    assert grad_check(tape, terms["total"], 1e-4) <= 1e-4


def test_objective_total_identity(small_model):
    rng = np.random.default_rng(10)
    al = small_aligned()
    m = init_steering(al, "rank", seed=3, layer=1)
    tape = Tape()
    terms = objective(tape, small_model, m, param_vars(tape, m), small_items(small_model, al, 1, rng, n=4))
    t, r, a = (float(terms[k].value[0, 0]) for k in ("task", "reg", "align"))
    assert abs(float(terms["total"].value[0, 0]) - (t + 0.3 * r + 0.5 * a)) <= 1e-12
    assert r >= 0 and 0 <= a <= 2


def test_frozen_parameters_get_no_gradient(small_model):
    rng = np.random.default_rng(11)
    al = small_aligned()
    m = init_steering(al, "attribute", layer=1, r_init="fixed", freeze_r=True)
    tape = Tape()
    pv = param_vars(tape, m)
    terms = objective(tape, small_model, m, pv, small_items(small_model, al, 1, rng))
    grads = backward(tape, terms["total"])
    assert pv["R"].id not in grads and pv["W"].id in grads


# ---------------------------------------------------------------------------
# Training


def toy_data(model, rng, n=6):
    data = {}
    for attr in ("A", "B"):
        data[attr] = [Example(attr, tuple(int(t) for t in rng.integers(0, 16, 5)), int(rng.integers(16))) for _ in range(n)]
    return data


def test_train_zero_lr_is_noop(small_model):
    al = small_aligned()
    m = init_steering(al, "attribute", layer=1)
    res = train(m, small_model, toy_data(small_model, np.random.default_rng(12)), TrainConfig(steps=1, lr=0.0))
    for k in PARAM_NAMES:
        assert np.array_equal(res.module.params[k], m.params[k])


def test_train_without_lambdas_total_is_task(small_model):
    al = small_aligned()
    m = init_steering(al, "rank", layer=1, lambda1=0.0, lambda2=0.0)
    res = train(m, small_model, toy_data(small_model, np.random.default_rng(13)), TrainConfig(steps=5))
    assert all(rec["total"] == rec["task"] for rec in res.log)


def test_train_deterministic_and_frozen(small_model):
    al = small_aligned()
    data = toy_data(small_model, np.random.default_rng(14))
    before = small_model.checksum()
    runs = [train(init_steering(al, "attribute", seed=5, layer=0), small_model, data, TrainConfig(steps=15)) for _ in range(2)]
    assert small_model.checksum() == before
    for k in PARAM_NAMES:
        assert np.array_equal(runs[0].module.params[k], runs[1].module.params[k])
    assert runs[0].log == runs[1].log
    assert [set(r) for r in runs[0].log][0] == {"step", "task", "reg", "align", "total"}


def test_train_reduces_loss_on_tiny_task(small_model):
    al = small_aligned()
    data = toy_data(small_model, np.random.default_rng(15), n=3)
    res = train(init_steering(al, "attribute", layer=1), small_model, data, TrainConfig(steps=150, lr=2e-2))
    first = np.mean([r["task"] for r in res.log[:10]])
    last = np.mean([r["task"] for r in res.log[-10:]])
    assert last < first


def test_frozen_r_stays_fixed(small_model):
    al = small_aligned()
    m = init_steering(al, "attribute", layer=1, r_init="fixed", freeze_r=True)
    res = train(m, small_model, toy_data(small_model, np.random.default_rng(16)), TrainConfig(steps=5))
    assert np.array_equal(res.module.params["R"], al.matrix)
    assert not np.array_equal(res.module.params["W"], m.params["W"])


def test_train_important_position(small_model):
    al = small_aligned()
    res = train(
        init_steering(al, "attribute", layer=1),
        small_model,
        toy_data(small_model, np.random.default_rng(17)),
        TrainConfig(steps=3, train_position="important"),
    )
    assert len(res.log) == 3


def test_train_divergence_reports_last_good(small_model):
    al = small_aligned()
    m = init_steering(al, "rank", layer=1)
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged) as ei:
        train(m, small_model, toy_data(small_model, np.random.default_rng(18)), TrainConfig(steps=5, lr=1e308))
    last = ei.value.last_good
    assert all(np.all(np.isfinite(v)) for v in last.params.values())


def test_train_rejects_bad_inputs(small_model):
    al = small_aligned()
    m = init_steering(al, layer=1)
    with pytest.raises(ValueError):
        train(m, small_model, {})
    with pytest.raises(ValueError):
        train(m, small_model, {"A": []})
