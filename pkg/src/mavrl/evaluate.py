"""Meta-test protocol, robust accuracy and the obfuscated-gradient probes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .attacks import AttackConfig, eval_attack_config, pgd_classwise
from .data import AugmentationPolicy, DatasetIndex, augment_view, derive_rng, sample_episode
from .model import MetaParams
from .objectives import inner_adapt


@dataclass
class EvalConfig:
    n_tasks: int = 400
    n_way: int = 5
    k_shot: int = 5
    q_shot: int = 15
    attack: AttackConfig = field(default_factory=eval_attack_config)
    inner_steps: int = 1
    augment_support: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")


@dataclass
class MetricsRecord:
    tasks_evaluated: int
    clean_accuracy: float
    robust_accuracy: float
    ci95_halfwidth: float
    robust_ci95_halfwidth: float
    attack: str
    checkpoint: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


class MetaLearner:
    """Adapts a meta-initialisation to a support set, the way it was trained."""

    def __init__(self, meta: MetaParams, inner_steps: int = 1):
        self.meta = meta.detach()
        self.inner_steps = inner_steps

    def adapt(self, images, labels):
        return inner_adapt(self.meta, images, labels, self.inner_steps,
                           phi_frozen=not self.meta.arch.adapt_head).detach()


def accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return (logits.argmax(-1) == labels).double().mean().item()


def ci95(values) -> float:
    """Normal-approximation 95% half-width, ``1.96 * std / sqrt(n)`` (population std)."""
    v = np.asarray(values, dtype=np.float64)
    return float(1.96 * v.std() / math.sqrt(len(v)))


def evaluate_robust(model, images, labels, atk: AttackConfig | None = None, rng=0) -> tuple[float, float]:
    """Clean and PGD accuracy of an adapted model (a callable images -> logits)."""
    atk = atk or eval_attack_config()
    with torch.no_grad():
        clean = accuracy(model(images), labels)
    if atk.steps == 0 and atk.init == "zero":
        return clean, clean
    adv = pgd_classwise(model, images, labels, atk, rng).adv_view1
    with torch.no_grad():
        robust = accuracy(model(adv), labels)
    return clean, robust


def meta_test(learner, index: DatasetIndex, cfg: EvalConfig, checkpoint_id: str = "",
              policy: AugmentationPolicy | None = None, progress=None) -> MetricsRecord:
    """Adapt on each task's clean support, score its query clean and under attack."""
    cleans, robusts = [], []
    for t in range(cfg.n_tasks):
        rng = derive_rng(cfg.seed, 7, t)
        ep = sample_episode(index, cfg.n_way, cfg.k_shot, cfg.q_shot, rng)
        support = ep.support_images
        if cfg.augment_support:
            support = augment_view(support, policy or AugmentationPolicy(), rng)
        model = learner.adapt(support, ep.support_labels)
        c, r = evaluate_robust(model, ep.query_images, ep.query_labels, cfg.attack, int(rng.integers(0, 2**63 - 1)))
        cleans.append(c)
        robusts.append(r)
        if progress:
            progress(t, c, r)
    return MetricsRecord(
        tasks_evaluated=cfg.n_tasks,
        clean_accuracy=float(np.mean(cleans)),
        robust_accuracy=float(np.mean(robusts)),
        ci95_halfwidth=ci95(cleans),
        robust_ci95_halfwidth=ci95(robusts),
        attack=cfg.attack.descriptor(),
        checkpoint=checkpoint_id,
    )


@dataclass
class ObfuscationThresholds:
    huge_epsilon: float = 0.5
    huge_steps: int = 20
    huge_max_robust: float = 0.05
    parity_gamma: float = 4 / 2550
    parity_steps: int = 40
    parity_tolerance: float = 0.03


def obfuscated_gradient_check(learner, index: DatasetIndex, cfg: EvalConfig,
                              thresholds: ObfuscationThresholds | None = None, checkpoint_id: str = "") -> dict:
    """Two sanity probes against masked gradients.

    1. a huge budget must drive robust accuracy to (nearly) zero;
    2. a finer, longer attack (half the step, twice the steps) must match the
       default evaluation within a tolerance.

    The huge-budget probe scales its step to ``2.5 * eps / steps`` so the
    iterate can actually reach the ball's boundary.
    """
    th = thresholds or ObfuscationThresholds()
    base = meta_test(learner, index, cfg, checkpoint_id)
    atk = cfg.attack
    if atk.steps == 0:
        huge_atk, parity_atk = atk, atk
    else:
        huge_atk = replace(atk, epsilon=th.huge_epsilon, steps=th.huge_steps,
                           gamma=2.5 * th.huge_epsilon / th.huge_steps)
        parity_atk = replace(atk, gamma=th.parity_gamma, steps=th.parity_steps)
    huge = meta_test(learner, index, replace(cfg, attack=huge_atk), checkpoint_id)
    parity = meta_test(learner, index, replace(cfg, attack=parity_atk), checkpoint_id)
    gap = abs(parity.robust_accuracy - base.robust_accuracy)
    huge_ok = atk.steps == 0 or huge.robust_accuracy <= th.huge_max_robust
    parity_ok = gap <= th.parity_tolerance
    return {
        "checkpoint": checkpoint_id,
        "thresholds": asdict(th),
        "baseline": base.as_dict(),
        "huge_epsilon": huge.as_dict(),
        "parity": parity.as_dict(),
        "parity_gap": gap,
        "huge_epsilon_pass": bool(huge_ok),
        "parity_pass": bool(parity_ok),
        "passed": bool(huge_ok and parity_ok),
    }
