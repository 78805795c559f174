"""Episodic meta-training loop with clean validation and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import replace
from pathlib import Path

import torch

from .attacks import AttackConfig
from .config import RunConfig, to_dict, write_manifest
from .data import DatasetIndex, derive_rng, sample_episode
from .evaluate import EvalConfig, MetaLearner, meta_test
from .model import Checkpoint, init_params, load_checkpoint, save_checkpoint
from .objectives import episode_objective, meta_gradients, meta_update

log = logging.getLogger(__name__)

TRAIN_STREAM = 1


def _episode_rng(seed, step, episode):
    return derive_rng(seed, TRAIN_STREAM, step, episode)


def _check_terms(terms, step):
    for k, v in terms.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"step {step}: loss term {k} is not finite ({v})")
        if v < -1e-6:
            raise FloatingPointError(f"step {step}: loss term {k} is negative ({v})")


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] <= step]
    path.write_text("".join(ln + "\n" for ln in keep))


def meta_train(cfg: RunConfig, train_index: DatasetIndex, val_index: DatasetIndex | None,
               out_dir: str | Path, resume: str | Path | None = None) -> Path:
    """Run meta-training and return the path of the last checkpoint.

    Writes ``manifest.json``, ``metrics.jsonl``, ``last.ckpt`` and (when a
    validation index is given) ``best.ckpt`` under ``out_dir``.  Episode
    randomness is derived from ``(seed, step, episode)``, so a resumed run
    continues exactly as the uninterrupted one would.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    if tc.val_tasks == 0:
        val_index = None
    hashes = {train_index.split: train_index.fingerprint()}
    if val_index is not None:
        hashes[val_index.split] = val_index.fingerprint()
    run_id = write_manifest(out, cfg, hashes)

    arch = replace(cfg.arch, n_way=cfg.data.n_way)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        meta, start = ckpt.params, ckpt.step
        best = ckpt.extra.get("best_val", -1.0)
    else:
        meta = init_params(arch, tc.inner_lr0, cfg.seed)
        start, best = 0, -1.0

    metrics_path = out / "metrics.jsonl"
    if resume is None:
        metrics_path.write_text("")
    else:
        _truncate_log(metrics_path, start)

    val_cfg = None if val_index is None else EvalConfig(
        n_tasks=tc.val_tasks, n_way=cfg.data.n_way, k_shot=tc.val_k_shot, q_shot=cfg.data.q_shot,
        attack=AttackConfig(steps=0), inner_steps=tc.inner_steps, seed=cfg.seed + 1)

    def checkpoint(name, step, params):
        extra = {"manifest": run_id, "config": to_dict(cfg), "best_val": best, "objective": tc.objective}
        rng_state = {"scheme": "SeedSequence([seed, 1, step, episode])", "seed": cfg.seed}
        return save_checkpoint(out / name, Checkpoint(params, step, {}, rng_state, extra))

    if start == 0:
        checkpoint("last.ckpt", 0, meta)

    atk = cfg.attack
    with metrics_path.open("a") as mlog:
        for step in range(start, tc.steps):
            t0 = time.perf_counter()
            meta_req = meta.detach().requires_grad_()
            grads, terms_sum, loss_sum = None, OrderedDict(), 0.0
            for e in range(tc.meta_batch):
                rng = _episode_rng(cfg.seed, step, e)
                ep = sample_episode(train_index, cfg.data.n_way, cfg.data.k_shot, cfg.data.q_shot, rng)
                loss, terms = episode_objective(tc, meta_req, ep, cfg.augment, atk, rng, lam=tc.lam_at(step))
                _check_terms(terms, step)
                g = meta_gradients(meta_req, loss / tc.meta_batch)
                grads = g if grads is None else OrderedDict((k, grads[k] + g[k]) for k in g)
                loss_sum += loss.item()
                for k, v in terms.items():
                    terms_sum[k] = terms_sum.get(k, 0.0) + v
            meta = meta_update(meta_req, grads, tc)
            done = step + 1
            if done % tc.log_every == 0 or done == tc.steps:
                rec = {"step": done, "kind": "train", "objective": tc.objective,
                       "loss": loss_sum / tc.meta_batch,
                       **{k: v / tc.meta_batch for k, v in terms_sum.items()},
                       "wall_time": time.perf_counter() - t0, "run": run_id}
                mlog.write(json.dumps(rec) + "\n")
            if val_index is not None and (done % tc.val_every == 0 or done == tc.steps):
                val = meta_test(MetaLearner(meta, tc.inner_steps), val_index, val_cfg)
                rec = {"step": done, "kind": "val", "val_clean_accuracy": val.clean_accuracy,
                       "val_ci95": val.ci95_halfwidth, "run": run_id}
                mlog.write(json.dumps(rec) + "\n")
                log.info("step %d  val clean acc %.4f", done, val.clean_accuracy)
                if val.clean_accuracy > best:
                    best = val.clean_accuracy
                    checkpoint("best.ckpt", done, meta)
                mlog.flush()
                checkpoint("last.ckpt", done, meta)
    if tc.steps > start:
        checkpoint("last.ckpt", tc.steps, meta)
    return out / "last.ckpt"


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


def torch_deterministic() -> None:
    torch.use_deterministic_algorithms(True)
