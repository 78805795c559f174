"""Representation and loss-landscape diagnostics.

* linear CKA between feature matrices,
* view-similarity and clean-vs-adversarial similarity reports,
* 2-D loss surfaces around an input,
* CSV export of clean/adversarial embeddings.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackConfig, multiview_latent_attack, pgd_classwise, selfsup_attack_single
from .data import AugmentationPolicy, DatasetIndex, derive_rng, make_multiview, sample_episode
from .evaluate import EvalConfig
from .model import MetaParams
from .objectives import cross_entropy, inner_adapt

CKA_STREAM = 21
EMBED_STREAM = 22


def cka(X, Y) -> float:
    """Linear CKA with column centring.

    ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)``
    """
    X = np.asarray(torch.as_tensor(X).detach().double() if torch.is_tensor(X) else X, dtype=np.float64)
    Y = np.asarray(torch.as_tensor(Y).detach().double() if torch.is_tensor(Y) else Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"CKA needs the same examples in both matrices: {X.shape[0]} vs {Y.shape[0]} rows")
    if X.shape[0] < 2:
        raise ValueError("CKA needs at least 2 examples")
    Xc = X - X.mean(0, keepdims=True)
    Yc = Y - Y.mean(0, keepdims=True)
    denom = np.linalg.norm(Xc.T @ Xc) * np.linalg.norm(Yc.T @ Yc)
    if denom == 0:
        raise ValueError("CKA undefined for zero-variance features")
    return float(min(1.0, np.linalg.norm(Yc.T @ Xc) ** 2 / denom))


def _encoder_only(meta, images, labels, steps):
    return inner_adapt(meta.detach(), images, labels, steps, phi_frozen=True).detach()


def view_cka_report(meta: MetaParams, index: DatasetIndex, cfg: EvalConfig,
                    policy: AugmentationPolicy, n_tasks: int = 20) -> dict:
    """Mean CKA between the two views' query features.

    ``bootstrapped``: each view is encoded by the encoder adapted on that
    view's support.  ``single_encoder``: both views go through the view-1
    encoder.
    """
    boot, single = [], []
    for t in range(n_tasks):
        rng = derive_rng(cfg.seed, CKA_STREAM, t)
        ep = sample_episode(index, cfg.n_way, cfg.k_shot, cfg.q_shot, rng)
        s1, s2, q1, q2 = make_multiview(ep, policy, rng)
        a1 = _encoder_only(meta, s1, ep.support_labels, cfg.inner_steps)
        a2 = _encoder_only(meta, s2, ep.support_labels, cfg.inner_steps)
        with torch.no_grad():
            boot.append(cka(a1.encode(q1), a2.encode(q2)))
            single.append(cka(a1.encode(q1), a1.encode(q2)))
    return {"tasks": n_tasks, "bootstrapped": float(np.mean(boot)), "single_encoder": float(np.mean(single)),
            "bootstrapped_per_task": boot, "single_encoder_per_task": single}


def attack_cka_report(meta: MetaParams, index: DatasetIndex, cfg: EvalConfig,
                      policy: AugmentationPolicy, atk: AttackConfig, n_tasks: int = 20) -> dict:
    """Mean CKA between clean and adversarial query features per attack type.

    All attacks share ``atk``'s budget, step size and step count.  Features
    come from the view-specialised encoder of the attacked view.
    """
    out = {"multiview_latent": [], "single_encoder_latent": [], "classwise": []}
    for t in range(n_tasks):
        rng = derive_rng(cfg.seed, CKA_STREAM + 1, t)
        ep = sample_episode(index, cfg.n_way, cfg.k_shot, cfg.q_shot, rng)
        s1, s2, q1, q2 = make_multiview(ep, policy, rng)
        a1 = _encoder_only(meta, s1, ep.support_labels, cfg.inner_steps)
        a2 = _encoder_only(meta, s2, ep.support_labels, cfg.inner_steps)
        seed = int(rng.integers(0, 2**63 - 1))
        mv = multiview_latent_attack(a1.encode, a2.encode, q1, q2, atk, seed)
        sg = selfsup_attack_single(a1.encode, q1, q2, atk, seed)
        cw = pgd_classwise(a1.logits, q1, ep.query_labels, atk, seed)
        with torch.no_grad():
            clean = a1.encode(q1)
            out["multiview_latent"].append(cka(clean, a1.encode(mv.adv_view1)))
            out["single_encoder_latent"].append(cka(clean, a1.encode(sg.adv_view1)))
            out["classwise"].append(cka(clean, a1.encode(cw.adv_view1)))
    report = {"tasks": n_tasks, "attack": atk.descriptor()}
    for k, v in out.items():
        report[k] = float(np.mean(v))
        report[f"{k}_per_task"] = v
    return report


def _direction(image: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # per-channel ("filter-wise") rescaling to the image's channel norms, then
    # unit L-inf so grid coordinates read in pixel units
    d = torch.randn(image.shape, generator=gen, dtype=image.dtype)
    dn = d.flatten(1).norm(dim=1).clamp_min(1e-12)
    xn = image.flatten(1).norm(dim=1)
    scale = torch.where(xn > 0, xn / dn, 1 / dn)
    d = d * scale.view(-1, *([1] * (image.dim() - 1)))
    return d / d.abs().max().clamp_min(1e-12)


def loss_surface_grid(model, image: torch.Tensor, label: int, rng=0, radius: float = 1.0,
                      resolution: int = 20, directions=None, chunk: int = 512) -> np.ndarray:
    """Cross-entropy over ``image + a*d1 + b*d2`` for ``a, b`` on a regular grid.

    Returns a ``(2*resolution+1, 2*resolution+1)`` array indexed ``[i_a, i_b]``
    with the unperturbed loss at the centre.  Directions are random Gaussian
    unless ``directions=(d1, d2)`` is supplied.
    """
    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(int(rng))
    if directions is None:
        d1, d2 = _direction(image, gen), _direction(image, gen)
    else:
        d1, d2 = (torch.as_tensor(d, dtype=image.dtype) for d in directions)
    coords = torch.linspace(-radius, radius, 2 * resolution + 1, dtype=image.dtype)
    coords[resolution] = 0.0
    a, b = torch.meshgrid(coords, coords, indexing="ij")
    a, b = a.reshape(-1), b.reshape(-1)
    shape = (-1,) + (1,) * image.dim()
    pts = image.unsqueeze(0) + a.view(shape) * d1.unsqueeze(0) + b.view(shape) * d2.unsqueeze(0)
    y = torch.full((pts.shape[0],), int(label), dtype=torch.long)
    losses = []
    with torch.no_grad():
        for i in range(0, pts.shape[0], chunk):
            logits = model(pts[i:i + chunk])
            losses.append(torch.nn.functional.cross_entropy(logits, y[i:i + chunk], reduction="none"))
        losses = torch.cat(losses)
        center = cross_entropy(model(image.unsqueeze(0)), y[:1])
    grid = losses.double().numpy().reshape(2 * resolution + 1, 2 * resolution + 1)
    grid[resolution, resolution] = float(center)
    return grid


def export_embeddings(meta: MetaParams, index: DatasetIndex, n_images: int, cfg: EvalConfig,
                      path: str | Path | None = None, adversarial: bool = True) -> str:
    """CSV of query features: ``image_id, class, kind, f0..f{d-1}``.

    Images are the queries of seeded meta-test episodes, in sampling order.
    Each gets a ``clean`` row and, when ``adversarial``, an ``adv`` row under
    the evaluation attack.  Returns the CSV text (also written to ``path``).
    """
    d = meta.arch.feature_dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "class", "kind"] + [f"f{i}" for i in range(d)])
    done, t = 0, 0
    while done < n_images:
        rng = derive_rng(cfg.seed, EMBED_STREAM, t)
        t += 1
        ep = sample_episode(index, cfg.n_way, cfg.k_shot, cfg.q_shot, rng)
        a = inner_adapt(meta.detach(), ep.support_images, ep.support_labels, cfg.inner_steps,
                        phi_frozen=not meta.arch.adapt_head).detach()
        take = min(n_images - done, len(ep.query_records))
        q, y = ep.query_images[:take], ep.query_labels[:take]
        with torch.no_grad():
            clean = a.encode(q)
        adv = None
        if adversarial:
            x_adv = pgd_classwise(a.logits, q, y, cfg.attack, int(rng.integers(0, 2**63 - 1))).adv_view1
            with torch.no_grad():
                adv = a.encode(x_adv)
        for i in range(take):
            rec, cls = ep.query_records[i], ep.class_map[int(y[i])]
            w.writerow([rec, cls, "clean"] + [f"{v:.9g}" for v in clean[i].tolist()])
            if adv is not None:
                w.writerow([rec, cls, "adv"] + [f"{v:.9g}" for v in adv[i].tolist()])
        done += take
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text

