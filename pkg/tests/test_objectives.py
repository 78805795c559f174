import math
from collections import OrderedDict

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mavrl.attacks import AttackConfig
from mavrl.data import AugmentationPolicy, derive_rng
from mavrl.model import ArchConfig, init_params
from mavrl.objectives import (
    TrainConfig,
    ablation_objective,
    aq_objective,
    bootstrap_multiview,
    clean_maml_objective,
    cosine_distance,
    cross_entropy,
    inner_adapt,
    kl_divergence,
    mavrl_objective,
    meta_gradients,
    meta_update,
    sgd_inner_step,
    sgd_step,
)

from oracles import FrozenAttacks, fd_probe_check, small_episode

ZERO = AttackConfig(steps=0)


# ---------------------------------------------------------------- primitives

def test_ce_uniform_is_log_n():
    for n in (2, 5, 10):
        assert cross_entropy(torch.zeros(3, n, dtype=torch.float64), torch.zeros(3, dtype=torch.long)).item() \
            == pytest.approx(math.log(n), abs=1e-12)


def test_ce_confident_logit():
    ce = cross_entropy(torch.tensor([[10.0, 0, 0, 0, 0]], dtype=torch.float64), torch.tensor([0])).item()
    assert ce == pytest.approx(math.log1p(4 * math.exp(-10)), rel=1e-12)
    assert ce == pytest.approx(1.8150e-4, rel=1e-3)


def test_ce_permutation_equivariant():
    g = torch.Generator().manual_seed(0)
    z, y = torch.randn(6, 5, generator=g, dtype=torch.float64), torch.tensor([0, 1, 2, 3, 4, 0])
    perm = torch.tensor([3, 0, 4, 1, 2])
    inv = torch.argsort(perm)
    assert cross_entropy(z[:, perm], inv[y]).item() == pytest.approx(cross_entropy(z, y).item(), abs=1e-12)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_kl_identical_zero():
    z = torch.randn(4, 5, dtype=torch.float64)
    assert kl_divergence(z, z).item() == pytest.approx(0.0, abs=1e-15)


def test_kl_derived_value():
    kl = kl_divergence(torch.tensor([[0.0, 0.0]], dtype=torch.float64),
                       torch.tensor([[math.log(3), 0.0]], dtype=torch.float64)).item()
    assert kl == pytest.approx(0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25), abs=1e-12)
    assert abs(kl - 0.14384) < 1e-5


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.01, 30))
def test_kl_non_negative(seed, scale):
    g = torch.Generator().manual_seed(seed)
    a, b = (torch.randn(3, 5, generator=g, dtype=torch.float64) * scale for _ in range(2))
    assert kl_divergence(a, b).item() >= 0


def test_cosine_distance_trivial_triple():
    v = torch.tensor([[0.3, -1.2, 2.0]], dtype=torch.float64)
    assert cosine_distance(v, v).item() == 0.0
    assert cosine_distance(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])).item() == pytest.approx(1.0)
    assert cosine_distance(torch.tensor([[1.0, 0.0]]), torch.tensor([[-1.0, 0.0]])).item() == pytest.approx(2.0)


def test_cosine_distance_zero_norm():
    with pytest.raises(ValueError, match="zero-norm"):
        cosine_distance(torch.zeros(1, 2), torch.ones(1, 2))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_cosine_distance_range(seed):
    g = torch.Generator().manual_seed(seed)
    d = cosine_distance(torch.randn(4, 3, generator=g), torch.randn(4, 3, generator=g)).item()
    assert 0 <= d <= 2


# ---------------------------------------------------------------- inner loop

def test_scalar_inner_step():
    t = torch.tensor(1.0, requires_grad=True)
    out = sgd_inner_step(OrderedDict(t=t), {"t": torch.tensor(0.1)}, t ** 2, first_order=False)
    assert out["t"].item() == pytest.approx(0.8)


def test_zero_alpha_keeps_theta(meta64, train_index):
    meta = meta64.map(lambda v: v.clone())
    meta.alpha = OrderedDict((k, torch.zeros_like(v)) for k, v in meta.alpha.items())
    ep = small_episode(train_index)
    a = inner_adapt(meta, ep.support_images, ep.support_labels)
    assert all(torch.equal(a.theta[k], meta.theta[k]) for k in meta.theta)


def test_phi_frozen_vs_adapted(train_index):
    arch = ArchConfig(widths=[8] * 4, adapt_head=True)
    meta = init_params(arch, 0.1, 0, dtype=torch.float64)
    ep = small_episode(train_index)
    frozen = inner_adapt(meta, ep.support_images, ep.support_labels, phi_frozen=True)
    moved = inner_adapt(meta, ep.support_images, ep.support_labels, phi_frozen=False)
    assert torch.equal(frozen.phi["head.w"], meta.phi["head.w"])
    assert not torch.equal(moved.phi["head.w"], meta.phi["head.w"])


def test_head_adaptation_needs_alpha(meta64, train_index):
    ep = small_episode(train_index)
    with pytest.raises(ValueError, match="adapt_head"):
        inner_adapt(meta64, ep.support_images, ep.support_labels, phi_frozen=False)


def test_bootstrap_identical_views(meta64, train_index):
    ep = small_episode(train_index)
    a1, a2 = bootstrap_multiview(meta64, ep.support_images, ep.support_images.clone(), ep.support_labels)
    assert all(torch.equal(a1.theta[k], a2.theta[k]) for k in a1.theta)


def test_bootstrap_distinct_views_differ(meta64, train_index):
    ep = small_episode(train_index)
    from mavrl.data import make_multiview
    s1, s2, _, _ = make_multiview(ep, AugmentationPolicy(), derive_rng(5))
    a1, a2 = bootstrap_multiview(meta64, s1, s2, ep.support_labels)
    assert max((a1.theta[k] - a2.theta[k]).abs().max().item() for k in a1.theta) > 0


# ---------------------------------------------------------------- outer objectives

def test_degenerate_mavrl_is_twice_ce(meta64, train_index):
    ep = small_episode(train_index)
    loss, terms = mavrl_objective(meta64, ep, AugmentationPolicy.identity(), ZERO, lam=6.0, rng=0)
    a = inner_adapt(meta64, ep.support_images, ep.support_labels)
    ce = cross_entropy(a.logits(ep.query_images), ep.query_labels).item()
    assert loss.item() == pytest.approx(2 * ce, abs=1e-6)
    assert terms["kl_view1"] == 0 and terms["kl_view2"] == 0 and terms["cos"] == 0


def test_mavrl_breakdown_sums_to_total(meta64, train_index):
    ep = small_episode(train_index)
    loss, terms = mavrl_objective(meta64, ep, AugmentationPolicy(), AttackConfig(steps=2), lam=6.0, rng=3)
    assert list(terms) == ["ce_view1", "kl_view1", "ce_view2", "kl_view2", "cos"]
    assert sum(terms.values()) == pytest.approx(loss.item(), rel=1e-6)


def test_mavrl_lambda_zero_removes_kl(meta64, train_index):
    ep = small_episode(train_index)
    _, terms = mavrl_objective(meta64, ep, AugmentationPolicy(), AttackConfig(steps=2), lam=0.0, rng=3)
    assert terms["kl_view1"] == 0 and terms["kl_view2"] == 0


def test_mavrl_deterministic(meta64, train_index):
    ep = small_episode(train_index)
    a = mavrl_objective(meta64, ep, AugmentationPolicy(), AttackConfig(steps=2), 6.0, rng=derive_rng(1))
    b = mavrl_objective(meta64, ep, AugmentationPolicy(), AttackConfig(steps=2), 6.0, rng=derive_rng(1))
    assert a[0].item() == b[0].item() and a[1] == b[1]


def test_aq_zero_steps_is_clean_maml(train_index):
    meta = init_params(ArchConfig(widths=[8] * 4, adapt_head=True), 0.05, 0, dtype=torch.float64)
    ep = small_episode(train_index)
    clean, _ = clean_maml_objective(meta, ep)
    aq, terms = aq_objective(meta, ep, ZERO, lam=6.0)
    assert aq.item() == pytest.approx(clean.item(), abs=1e-12) and terms["kl"] == 0
    aq0, _ = aq_objective(meta, ep, ZERO, lam=0.0)
    assert aq0.item() == pytest.approx(clean.item(), abs=1e-12)


def test_ablation_structure(meta64, train_index):
    ep = small_episode(train_index)
    _, t1 = ablation_objective(1, meta64, ep, AugmentationPolicy(), AttackConfig(steps=1), 6.0, rng=0)
    _, t2 = ablation_objective(2, meta64, ep, AugmentationPolicy(), AttackConfig(steps=1), 6.0, rng=0)
    assert list(t1) == ["ce_view1", "kl_view1", "ce_view2", "kl_view2"]
    assert list(t2) == list(t1) + ["cos"]
    with pytest.raises(ValueError):
        ablation_objective(3, meta64, ep, AugmentationPolicy(), ZERO, 6.0)


def test_ablation_identical_views(meta64, train_index):
    ep = small_episode(train_index)
    l1, _ = ablation_objective(1, meta64, ep, AugmentationPolicy.identity(), AttackConfig(steps=2), 6.0, rng=0)
    l2, t2 = ablation_objective(2, meta64, ep, AugmentationPolicy.identity(), AttackConfig(steps=2), 6.0, rng=0)
    assert t2["cos"] == 0 and l1.item() == l2.item()


def test_ablation_zero_steps_no_kl(meta64, train_index):
    ep = small_episode(train_index)
    _, t = ablation_objective(2, meta64, ep, AugmentationPolicy(), ZERO, 6.0, rng=0)
    assert t["kl_view1"] == 0 and t["kl_view2"] == 0


def test_first_and_second_order_agree_without_adaptation(meta64, train_index):
    meta = meta64.map(lambda v: v.clone())
    meta.alpha = OrderedDict((k, torch.zeros_like(v)) for k, v in meta.alpha.items())
    ep = small_episode(train_index)
    grads = []
    for fo in (True, False):
        m = meta.detach().requires_grad_()
        loss, _ = mavrl_objective(m, ep, AugmentationPolicy(), AttackConfig(steps=1), 6.0, first_order=fo, rng=2)
        grads.append(meta_gradients(m, loss))
    # identical up to floating-point summation order of the extra (zero-weighted) terms
    for k in grads[0]:
        torch.testing.assert_close(grads[0][k], grads[1][k], rtol=1e-10, atol=1e-12, msg=k)


# ---------------------------------------------------------------- outer update

def test_meta_update_zero_grad_no_decay(meta64):
    cfg = TrainConfig(weight_decay=0.0)
    grads = OrderedDict((k, torch.zeros_like(v)) for k, v in meta64.named().items())
    new = meta_update(meta64, grads, cfg)
    assert all(torch.equal(a, b) for a, b in zip(new.tensors(), meta64.tensors()))


def test_sgd_scalar():
    out = sgd_step({"p": torch.tensor(1.0)}, {"p": torch.tensor(2.0)}, lr=0.1)
    assert out["p"].item() == pytest.approx(0.8)


def test_sgd_weight_decay_formula():
    rng = np.random.default_rng(0)
    p, g = rng.normal(size=7), rng.normal(size=7)
    out = sgd_step({"p": torch.tensor(p)}, {"p": torch.tensor(g)}, lr=0.05, weight_decay=1e-4)["p"].numpy()
    np.testing.assert_allclose(out, p - 0.05 * (g + 1e-4 * p), atol=1e-9)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        sgd_step({"p": torch.zeros(3)}, {"p": torch.zeros(2)}, lr=0.1)


def test_alpha_floor(meta64):
    cfg = TrainConfig(outer_lr=1.0, weight_decay=0.0)
    grads = OrderedDict((k, torch.full_like(v, 10.0) if k.startswith("alpha/") else torch.zeros_like(v))
                        for k, v in meta64.named().items())
    new = meta_update(meta64, grads, cfg)
    assert all((a >= cfg.alpha_floor).all() for a in new.alpha.values())


def test_lam_warmup_ramp():
    cfg = TrainConfig(lam=6.0, lam_warmup=100)
    assert [cfg.lam_at(s) for s in (0, 50, 100, 500)] == [0.0, 3.0, 6.0, 6.0]
    assert TrainConfig(lam=6.0).lam_at(0) == 6.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(objective="trades")
    with pytest.raises(ValueError):
        TrainConfig(gradient_mode="zeroth")
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)


# ---------------------------------------------------------------- finite differences

def test_inner_adapt_gradient_fd(smooth_arch, train_index):
    meta = init_params(smooth_arch, 0.05, 0, dtype=torch.float64)
    ep = small_episode(train_index, seed=1)

    def loss_fn(m):
        a = inner_adapt(m, ep.support_images, ep.support_labels, first_order=False)
        return cross_entropy(a.logits(ep.query_images), ep.query_labels)

    _, bad = fd_probe_check(loss_fn, meta, 8, seed=0)
    assert not bad, bad


def test_inner_adapt_gradient_fd_relu_small_step(meta64, train_index):
    # relu makes the second-order inner step piecewise smooth; a small step stays inside one piece
    ep = small_episode(train_index, seed=1)

    def loss_fn(m):
        a = inner_adapt(m, ep.support_images, ep.support_labels, first_order=False)
        return cross_entropy(a.logits(ep.query_images), ep.query_labels)

    _, bad = fd_probe_check(loss_fn, meta64, 8, seed=0, h=1e-6)
    assert not bad, bad


def test_mavrl_second_order_gradient_fd(smooth_arch, train_index, monkeypatch):
    meta = init_params(smooth_arch, 0.05, 0, dtype=torch.float64)
    ep = small_episode(train_index, seed=2)
    FrozenAttacks(monkeypatch)
    loss_fn = lambda m: mavrl_objective(m, ep, AugmentationPolicy(), AttackConfig(steps=2), 6.0,
                                        first_order=False, rng=4)[0]
    _, bad = fd_probe_check(loss_fn, meta, 8, seed=1)
    assert not bad, bad


def test_aq_second_order_gradient_fd(smooth_arch, train_index, monkeypatch):
    from dataclasses import replace
    meta = init_params(replace(smooth_arch, adapt_head=True), 0.05, 1, dtype=torch.float64)
    ep = small_episode(train_index, seed=3)
    FrozenAttacks(monkeypatch)
    loss_fn = lambda m: aq_objective(m, ep, AttackConfig(steps=2), 6.0, first_order=False, rng=4)[0]
    _, bad = fd_probe_check(loss_fn, meta, 8, seed=2)
    assert not bad, bad
