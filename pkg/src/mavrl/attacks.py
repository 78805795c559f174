"""L-infinity attacks: class-wise PGD and the label-free latent attacks.

Every attack takes plain callables (images -> logits or images -> features)
so it works for adapted meta-learners, stubs and hand-built toy models alike.
Returned tensors are detached; the attack never writes into parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

INITS = ("zero", "uniform")


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    gamma: float = 2 / 255
    steps: int = 7
    temperature: float = 0.5
    init: str = "zero"
    clamp_pixels: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and self.gamma <= 0:
            raise ValueError("gamma must be > 0 when steps > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")

    def descriptor(self) -> str:
        return (f"linf eps={self.epsilon:.6g} ({self.epsilon * 255:g}/255) "
                f"gamma={self.gamma:.6g} ({self.gamma * 255:g}/255) steps={self.steps} "
                f"init={self.init} T={self.temperature:g}")


def eval_attack_config() -> AttackConfig:
    """PGD-20 with eps=8/255 and step 8/2550."""
    return AttackConfig(epsilon=8 / 255, gamma=8 / 2550, steps=20)


@dataclass
class AdversarialBatch:
    clean_view1: torch.Tensor
    adv_view1: torch.Tensor
    delta1: torch.Tensor
    clean_view2: torch.Tensor | None = None
    adv_view2: torch.Tensor | None = None
    delta2: torch.Tensor | None = None
    attack_loss_trace: list[float] = field(default_factory=list)


def project_linf(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return delta.clamp(-epsilon, epsilon)


def _torch_gen(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    if rng is None:
        rng = 0
    if isinstance(rng, np.random.Generator):
        rng = int(rng.integers(0, 2**63 - 1))
    return torch.Generator().manual_seed(int(rng))


def _start(x, cfg: AttackConfig, gen):
    if cfg.init == "uniform" and cfg.epsilon > 0:
        u = torch.rand(x.shape, generator=gen, dtype=x.dtype)
        return _finalize(x, x + (2 * u - 1) * cfg.epsilon, cfg)
    return x.clone()


def _finalize(x, adv, cfg: AttackConfig):
    """Project ``adv`` onto the ball around ``x`` (and [0, 1]) so the bound holds in float64.

    The ball's bounds are computed in float64 and rounded inwards to
    ``x.dtype``; ``x - eps`` rounded in float32 can sit outside the ball.
    """
    lo, hi = _inward(x.double() - cfg.epsilon, x.dtype, -1), _inward(x.double() + cfg.epsilon, x.dtype, 1)
    adv = torch.maximum(torch.minimum(adv, hi), lo)
    if cfg.clamp_pixels:
        adv = adv.clamp(0, 1)
    # float64 inputs: the computed difference may still round past eps by an ulp
    for _ in range(4):
        over = (adv.double() - x.double()).abs() > cfg.epsilon
        if not over.any():
            break
        adv = torch.where(over, torch.nextafter(adv, x), adv)
    return adv


def _inward(bound64, dtype, side):
    b = bound64.to(dtype)
    outside = b.double() > bound64 if side > 0 else b.double() < bound64
    return torch.where(outside, torch.nextafter(b, torch.full_like(b, -side * float("inf"))), b)


def _ascend(x, adv, grad, cfg):
    return _finalize(x, adv + cfg.gamma * grad.sign(), cfg)


def pgd_classwise(logits_fn, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig, rng=None) -> AdversarialBatch:
    """Signed-gradient ascent on the cross-entropy of the task labels."""
    x = x.detach()
    adv = _start(x, cfg, _torch_gen(rng))
    trace = []
    for _ in range(cfg.steps):
        adv.requires_grad_(True)
        with torch.enable_grad():
            loss = F.cross_entropy(logits_fn(adv), y)
            (grad,) = torch.autograd.grad(loss, adv)
        trace.append(loss.item())
        adv = _ascend(x, adv.detach(), grad, cfg)
    if cfg.steps:
        with torch.no_grad():
            trace.append(F.cross_entropy(logits_fn(adv), y).item())
    return AdversarialBatch(clean_view1=x, adv_view1=adv, delta1=adv - x, attack_loss_trace=trace)


def _unit(z, strict=False):
    norms = z.norm(dim=-1, keepdim=True)
    if strict and (norms == 0).any():
        raise ValueError("zero-norm latent vector: cosine similarity undefined")
    return z / norms.clamp_min(1e-12)


def info_nce(z, z_pos, negs, temperature, neg_mask=None, strict=False):
    """Per-row contrastive loss ``-log(e^{s+/T} / (e^{s+/T} + sum_neg e^{s-/T}))``.

    ``z``, ``z_pos``: [B, d]; ``negs``: [M, d]; ``neg_mask``: bool [B, M]
    selecting which negatives belong to each row (all when None).
    """
    z, z_pos = _unit(z, strict), _unit(z_pos, strict)
    pos = (z * z_pos).sum(-1, keepdim=True) / temperature
    if negs is None or negs.shape[0] == 0:
        return torch.zeros(z.shape[0], dtype=z.dtype)
    neg = z @ _unit(negs, strict).T / temperature
    if neg_mask is not None:
        neg = neg.masked_fill(~neg_mask, float("-inf"))
    return torch.logsumexp(torch.cat([pos, neg], dim=1), dim=1) - pos[:, 0]


def contrastive_sim_loss(z: torch.Tensor, z_pos: torch.Tensor, negs, temperature: float = 0.5) -> torch.Tensor:
    """Contrastive similarity loss for a single anchor ``z`` (1-D latent vectors)."""
    z = torch.as_tensor(z, dtype=torch.float64) if not torch.is_tensor(z) else z
    z_pos = torch.as_tensor(z_pos, dtype=z.dtype) if not torch.is_tensor(z_pos) else z_pos
    if negs is None or len(negs) == 0:
        negs = z.new_zeros((0, z.shape[-1]))
    elif not torch.is_tensor(negs):
        negs = torch.stack([torch.as_tensor(n, dtype=z.dtype) for n in negs])
    return info_nce(z.reshape(1, -1), z_pos.reshape(1, -1), negs.reshape(-1, z.shape[-1]),
                    temperature, strict=True)[0]


def _others_mask(b: int, copies: int) -> torch.Tensor:
    # negatives bank is `copies` stacked batches; exclude each row's own instance
    eye = torch.eye(b, dtype=torch.bool)
    return ~eye.repeat(1, copies)


def _latent_attack(enc_adv, enc_pos, t_adv, t_pos, negs, cfg, gen, n_copies):
    x = t_adv.detach()
    adv = _start(x, cfg, gen)
    with torch.no_grad():
        z_pos = enc_pos(t_pos)
    mask = _others_mask(x.shape[0], n_copies)
    trace = []
    for _ in range(cfg.steps):
        adv.requires_grad_(True)
        with torch.enable_grad():
            loss = info_nce(enc_adv(adv), z_pos, negs, cfg.temperature, mask).mean()
            (grad,) = torch.autograd.grad(loss, adv)
        trace.append(loss.item())
        adv = _ascend(x, adv.detach(), grad, cfg)
    if cfg.steps:
        with torch.no_grad():
            trace.append(info_nce(enc_adv(adv), z_pos, negs, cfg.temperature, mask).mean().item())
    return adv, trace


def multiview_latent_attack(encoder1, encoder2, t1_q: torch.Tensor, t2_q: torch.Tensor,
                            cfg: AttackConfig, rng=None) -> AdversarialBatch:
    """Perturb each view to push its latent away from the other view's latent.

    View 1 ascends the contrastive loss of ``encoder1(t1 + d1)`` against the
    positive ``encoder1(t2)``; view 2 mirrors it with ``encoder2``.  Both share
    the negative bank ``{encoder1(t1_j), encoder2(t2_j)}`` over the other
    instances j of the batch.
    """
    b = t1_q.shape[0]
    if b < 2:
        raise ValueError("no negatives available: latent attacks need a batch of at least 2")
    gen = _torch_gen(rng)
    with torch.no_grad():
        negs = torch.cat([encoder1(t1_q), encoder2(t2_q)])
    adv1, tr1 = _latent_attack(encoder1, encoder1, t1_q, t2_q, negs, cfg, gen, 2)
    adv2, tr2 = _latent_attack(encoder2, encoder2, t2_q, t1_q, negs, cfg, gen, 2)
    trace = [a + b for a, b in zip(tr1, tr2)]
    return AdversarialBatch(t1_q.detach(), adv1, adv1 - t1_q, t2_q.detach(), adv2, adv2 - t2_q, trace)


def selfsup_attack_single(encoder, t1_q: torch.Tensor, t2_q: torch.Tensor,
                          cfg: AttackConfig, rng=None) -> AdversarialBatch:
    """Instance-wise attack with one adapted encoder for both views."""
    return multiview_latent_attack(encoder, encoder, t1_q, t2_q, cfg, rng)
