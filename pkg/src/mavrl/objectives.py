"""Loss primitives, inner adaptation and the outer meta-objectives.

Outer objectives return ``(loss, terms)`` where ``terms`` maps each additive
component to its (already weighted) float contribution, so
``sum(terms.values()) == loss``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackConfig, multiview_latent_attack, pgd_classwise, selfsup_attack_single
from .data import AugmentationPolicy, EpisodeTask, make_multiview
from .model import MetaParams, Network

OBJECTIVES = ("mavrl", "aq", "ablation1", "ablation2", "clean-maml")
GRADIENT_MODES = ("first-order", "second-order")


@dataclass
class TrainConfig:
    objective: str = "mavrl"
    lam: float = 6.0
    lam_warmup: int = 0
    inner_lr0: float = 0.005
    outer_lr: float = 0.005
    weight_decay: float = 1e-4
    meta_batch: int = 16
    inner_steps: int = 1
    gradient_mode: str = "first-order"
    alpha_floor: float = 1e-8
    steps: int = 100_000
    val_every: int = 500
    val_tasks: int = 100
    val_k_shot: int = 1
    log_every: int = 1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lam_warmup < 0:
            raise ValueError("lam_warmup must be >= 0")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.inner_lr0 <= 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0 or self.inner_steps < 0 or self.steps < 0:
            raise ValueError("weight_decay, inner_steps and steps must be non-negative")

    @property
    def first_order(self) -> bool:
        return self.gradient_mode == "first-order"

    def lam_at(self, step: int) -> float:
        """KL weight at outer step ``step``: linear ramp over ``lam_warmup`` steps."""
        if self.lam_warmup == 0:
            return self.lam
        return self.lam * min(1.0, step / self.lam_warmup)


# ---------------------------------------------------------------- primitives

def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    n = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in 0..{n - 1}")
    return F.cross_entropy(logits, labels)


def kl_divergence(logits_adv: torch.Tensor, logits_clean: torch.Tensor) -> torch.Tensor:
    """Batch-mean ``KL(softmax(logits_adv) || softmax(logits_clean))``."""
    logp_adv = F.log_softmax(logits_adv, dim=-1)
    logp_clean = F.log_softmax(logits_clean, dim=-1)
    return (logp_adv.exp() * (logp_adv - logp_clean)).sum(-1).mean()


def cosine_distance(u: torch.Tensor, v: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """Mean over rows of ``1 - cos(u, v)``.

    Evaluated as ``|u/|u| - v/|v||^2 / 2`` which is algebraically identical
    and exactly zero for identical inputs.
    """
    u = torch.as_tensor(u, dtype=torch.float64) if not torch.is_tensor(u) else u
    v = torch.as_tensor(v, dtype=u.dtype) if not torch.is_tensor(v) else v
    u2, v2 = u.reshape(-1, u.shape[-1]), v.reshape(-1, v.shape[-1])
    nu, nv = u2.norm(dim=-1, keepdim=True), v2.norm(dim=-1, keepdim=True)
    if strict and ((nu == 0).any() or (nv == 0).any()):
        raise ValueError("cosine distance undefined for zero-norm vectors")
    du = u2 / nu.clamp_min(1e-12)
    dv = v2 / nv.clamp_min(1e-12)
    return 0.5 * ((du - dv) ** 2).sum(-1).mean()


# ---------------------------------------------------------------- inner loop

class Adapted:
    """Task-specific parameters produced by inner adaptation."""

    def __init__(self, network: Network, theta, phi, provenance=None):
        self.network = network
        self.theta = theta
        self.phi = phi
        self.provenance = provenance

    def _cast(self, images):
        return images.to(next(iter(self.theta.values())).dtype)

    def encode(self, images):
        return self.network.encode(self.theta, self._cast(images))

    def logits(self, images):
        return self.network.logits(self.theta, self.phi, self._cast(images))

    __call__ = logits

    def detach(self) -> "Adapted":
        d = lambda p: OrderedDict((k, v.detach()) for k, v in p.items())  # noqa: E731
        return Adapted(self.network, d(self.theta), d(self.phi), self.provenance)


def sgd_inner_step(params: "OrderedDict[str, torch.Tensor]", alpha, loss: torch.Tensor,
                   first_order: bool = True) -> "OrderedDict[str, torch.Tensor]":
    """``p - alpha * dloss/dp`` for every entry of ``params`` named in ``alpha``."""
    names = [k for k in params if k in alpha]
    grads = torch.autograd.grad(loss, [params[k] for k in names], create_graph=not first_order,
                                allow_unused=True)
    out = OrderedDict(params)
    for k, g in zip(names, grads):
        if g is None:
            continue
        if first_order:
            g = g.detach()
        out[k] = params[k] - alpha[k] * g
    return out


def _needs_grad(params):
    return OrderedDict((k, v if v.requires_grad else v.detach().requires_grad_(True)) for k, v in params.items())


def inner_adapt(meta: MetaParams, images: torch.Tensor, labels: torch.Tensor, steps: int = 1,
                phi_frozen: bool = True, first_order: bool = True, provenance=None) -> Adapted:
    """Inner-gradient adaptation on a support batch.

    With ``phi_frozen`` only the encoder moves (MAVRL rule); otherwise encoder
    and head move together, which needs alpha entries for the head.
    """
    net = meta.network()
    images = images.to(next(iter(meta.theta.values())).dtype)
    theta, phi = meta.theta, meta.phi
    if not phi_frozen and not all(k in meta.alpha for k in phi):
        raise ValueError("adapting the head requires alpha entries for it (arch.adapt_head)")
    with torch.enable_grad():
        for _ in range(steps):
            theta = _needs_grad(theta)
            if not phi_frozen:
                phi = _needs_grad(phi)
            loss = cross_entropy(net.logits(theta, phi, images), labels)
            joint = OrderedDict(list(theta.items()) + (list(phi.items()) if not phi_frozen else []))
            new = sgd_inner_step(joint, meta.alpha, loss, first_order)
            theta = OrderedDict((k, new[k]) for k in theta)
            if not phi_frozen:
                phi = OrderedDict((k, new[k]) for k in phi)
    return Adapted(net, theta, phi, provenance)


def bootstrap_multiview(meta: MetaParams, t1_support, t2_support, labels, steps: int = 1,
                        first_order: bool = True) -> tuple[Adapted, Adapted]:
    """Two view-specialised encoders adapted from the same initialisation."""
    a1 = inner_adapt(meta, t1_support, labels, steps, True, first_order, provenance=("view", 1))
    a2 = inner_adapt(meta, t2_support, labels, steps, True, first_order, provenance=("view", 2))
    return a1, a2


# ---------------------------------------------------------------- outer objectives

def _rngs(rng):
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    view_seed, atk_seed = rng.integers(0, 2**63 - 1, size=2)
    return np.random.default_rng(view_seed), int(atk_seed)


def _as(meta, t):
    return t.to(next(iter(meta.theta.values())).dtype)


def _terms(**kw):
    return OrderedDict((k, float(v)) for k, v in kw.items())


def mavrl_objective(meta: MetaParams, episode: EpisodeTask, policy: AugmentationPolicy,
                    atk: AttackConfig, lam: float, inner_steps: int = 1, first_order: bool = True,
                    rng=0):
    """Two-view adversarial training plus cross-view consistency of adversarial latents."""
    view_rng, atk_seed = _rngs(rng)
    s1, s2, q1, q2 = (_as(meta, t) for t in make_multiview(episode, policy, view_rng))
    y_s, y_q = episode.support_labels, episode.query_labels
    a1, a2 = bootstrap_multiview(meta, s1, s2, y_s, inner_steps, first_order)
    d1, d2 = a1.detach(), a2.detach()
    batch = multiview_latent_attack(d1.encode, d2.encode, q1, q2, atk, atk_seed)

    parts = {}
    loss = 0.0
    for j, (a, q, adv) in enumerate([(a1, q1, batch.adv_view1), (a2, q2, batch.adv_view2)], 1):
        z_clean = a.encode(q)
        z_adv = a.encode(adv)
        clean_logits = a.network.classify(a.phi, z_clean)
        adv_logits = a.network.classify(a.phi, z_adv)
        ce = cross_entropy(clean_logits, y_q)
        kl = lam * kl_divergence(adv_logits, clean_logits)
        parts[f"ce_view{j}"], parts[f"kl_view{j}"], parts[f"_zadv{j}"] = ce, kl, z_adv
        loss = loss + ce + kl
    cos = cosine_distance(parts.pop("_zadv1"), parts.pop("_zadv2"), strict=False)
    loss = loss + cos
    parts["cos"] = cos
    return loss, _terms(**{k: v.detach() for k, v in parts.items()})


def aq_objective(meta: MetaParams, episode: EpisodeTask, atk: AttackConfig, lam: float,
                 inner_steps: int = 1, first_order: bool = True, rng=0):
    """Class-wise adversarial querying: clean CE plus weighted KL to the PGD query."""
    _, atk_seed = _rngs(rng)
    a = inner_adapt(meta, episode.support_images, episode.support_labels, inner_steps,
                    phi_frozen=not meta.arch.adapt_head, first_order=first_order)
    q = _as(meta, episode.query_images)
    y = episode.query_labels
    ce_only = lam == 0 and atk.steps == 0
    clean_logits = a.logits(q)
    ce = cross_entropy(clean_logits, y)
    if ce_only:
        kl = torch.zeros((), dtype=ce.dtype)
    else:
        adv = pgd_classwise(a.detach().logits, q, y, atk, atk_seed).adv_view1
        kl = lam * kl_divergence(a.logits(adv), clean_logits)
    return ce + kl, _terms(ce=ce.detach(), kl=kl.detach())


def clean_maml_objective(meta: MetaParams, episode: EpisodeTask, inner_steps: int = 1,
                         first_order: bool = True, rng=0):
    a = inner_adapt(meta, episode.support_images, episode.support_labels, inner_steps,
                    phi_frozen=not meta.arch.adapt_head, first_order=first_order)
    ce = cross_entropy(a.logits(_as(meta, episode.query_images)), episode.query_labels)
    return ce, _terms(ce=ce.detach())


def ablation_objective(variant: int, meta: MetaParams, episode: EpisodeTask, policy: AugmentationPolicy,
                       atk: AttackConfig, lam: float, inner_steps: int = 1, first_order: bool = True,
                       rng=0):
    """Naive combinations with one adapted encoder and the single-encoder attack.

    Variant 1 keeps the two-view adversarial training terms; variant 2 adds the
    cross-view consistency term.
    """
    if variant not in (1, 2):
        raise ValueError("ablation variant must be 1 or 2")
    view_rng, atk_seed = _rngs(rng)
    _, _, q1, q2 = (_as(meta, t) for t in make_multiview(episode, policy, view_rng))
    a = inner_adapt(meta, episode.support_images, episode.support_labels, inner_steps,
                    phi_frozen=True, first_order=first_order)
    y = episode.query_labels
    batch = selfsup_attack_single(a.detach().encode, q1, q2, atk, atk_seed)
    parts, loss, z_adv = OrderedDict(), 0.0, []
    for j, (q, adv) in enumerate([(q1, batch.adv_view1), (q2, batch.adv_view2)], 1):
        clean_logits = a.logits(q)
        za = a.encode(adv)
        z_adv.append(za)
        ce = cross_entropy(clean_logits, y)
        kl = lam * kl_divergence(a.network.classify(a.phi, za), clean_logits)
        parts[f"ce_view{j}"], parts[f"kl_view{j}"] = ce, kl
        loss = loss + ce + kl
    if variant == 2:
        cos = cosine_distance(z_adv[0], z_adv[1], strict=False)
        parts["cos"] = cos
        loss = loss + cos
    return loss, _terms(**{k: v.detach() for k, v in parts.items()})


def episode_objective(cfg: TrainConfig, meta: MetaParams, episode: EpisodeTask,
                      policy: AugmentationPolicy, atk: AttackConfig, rng, lam: float | None = None):
    kw = dict(inner_steps=cfg.inner_steps, first_order=cfg.first_order, rng=rng)
    lam = cfg.lam if lam is None else lam
    if cfg.objective == "mavrl":
        return mavrl_objective(meta, episode, policy, atk, lam, **kw)
    if cfg.objective == "aq":
        return aq_objective(meta, episode, atk, lam, **kw)
    if cfg.objective == "clean-maml":
        return clean_maml_objective(meta, episode, **kw)
    return ablation_objective(int(cfg.objective[-1]), meta, episode, policy, atk, lam, **kw)


# ---------------------------------------------------------------- outer update

def meta_gradients(meta: MetaParams, loss: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
    named = meta.named()
    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
    return OrderedDict((k, torch.zeros_like(v) if g is None else g) for (k, v), g in zip(named.items(), grads))


def sgd_step(params, grads, lr: float, weight_decay: float = 0.0):
    """Plain SGD with L2 weight decay: ``p - lr * (g + wd * p)``."""
    out = OrderedDict()
    for k, p in params.items():
        if k not in grads:
            raise ValueError(f"missing gradient for {k!r}")
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k!r} has shape {tuple(g.shape)}, parameter has {tuple(p.shape)}")
        out[k] = p - lr * (g + weight_decay * p)
    return out


def meta_update(meta: MetaParams, grads, cfg: TrainConfig) -> MetaParams:
    named = OrderedDict((k, v.detach()) for k, v in meta.named().items())
    if set(grads) != set(named):
        raise ValueError("gradients are not congruent with (theta, phi, alpha)")
    with torch.no_grad():
        new = sgd_step(named, grads, cfg.outer_lr, cfg.weight_decay)
        for k in new:
            if k.startswith("alpha/"):
                new[k] = new[k].clamp_min(cfg.alpha_floor)
    return MetaParams.from_named(meta.arch, new)
