"""``mavrl`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config, to_dict
from .data import DatasetError, SamplingError, derive_rng, load_dataset, make_multiview, sample_episode

log = logging.getLogger("mavrl")

SUBCOMMANDS = ("train", "eval", "attack", "cka", "loss-surface", "obf-check", "export-embeddings", "make-fixture")


class UsageError(Exception):
    pass


def _config_args(p):
    p.add_argument("--config", help="YAML run config (path or shipped name: paper-cifar-fs, fixture-smoke)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one dotted config key; repeatable")


def _checkpoint_args(p, out_help):
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by `train`")
    p.add_argument("--data", help="dataset root (defaults to data.root of the config)")
    p.add_argument("--manifest", help="split manifest (defaults to <data>/splits.txt)")
    p.add_argument("--split", default=None, help="split to draw tasks from (default: data.test_split)")
    p.add_argument("--out", help=out_help)
    _config_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mavrl", description="Robust few-shot meta-learning with multi-view adversarial training.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("train", help="meta-train a model")
    _config_args(p)
    p.add_argument("--data", help="dataset root (overrides data.root)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="meta-test clean and robust accuracy")
    _checkpoint_args(p, "report JSON path (default: <checkpoint dir>/eval.json)")

    p = sub.add_parser("attack", help="attack one task's query set and save the adversarial batch")
    _checkpoint_args(p, "output directory (default: <checkpoint dir>/attack)")
    p.add_argument("--kind", choices=("classwise", "multiview", "single"), default="multiview")
    p.add_argument("--task", type=int, default=0, help="task index within the seeded stream")

    p = sub.add_parser("cka", help="view and clean-vs-adversarial CKA reports")
    _checkpoint_args(p, "output directory (default: <checkpoint dir>/cka)")

    p = sub.add_parser("loss-surface", help="2-D input-space loss surface around a query image")
    _checkpoint_args(p, "output directory (default: <checkpoint dir>/loss_surface)")
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--image", type=int, default=0, help="query index within the task")

    p = sub.add_parser("obf-check", help="obfuscated-gradient probes")
    _checkpoint_args(p, "report JSON path (default: <checkpoint dir>/obf_check.json)")

    p = sub.add_parser("export-embeddings", help="write clean/adversarial query features to CSV")
    _checkpoint_args(p, "CSV path (default: <checkpoint dir>/embeddings.csv)")
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--clean-only", action="store_true")

    p = sub.add_parser("make-fixture", help="write the synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-classes", type=int, default=8)
    p.add_argument("--images-per-class", type=int, default=30)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--splits", help="class counts per split as TRAIN,VAL,TEST (default 64/16/20 proportions)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.06)
    return parser


# ---------------------------------------------------------------- helpers

def _load_cfg(args) -> RunConfig:
    return load_config(args.config, args.overrides)


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _dataset(cfg, args, split):
    root = args.data or cfg.data.root
    if not root:
        raise UsageError("no dataset given: pass --data or set data.root")
    manifest = args.manifest or (cfg.data.manifest if cfg.data.manifest and not args.data else None) \
        or Path(root) / "splits.txt"
    return load_dataset(root, manifest, split)


def _checkpoint_context(args):
    from .model import file_sha256, load_checkpoint

    cfg = _load_cfg(args)
    ckpt = load_checkpoint(args.checkpoint)
    split = args.split or cfg.data.test_split
    index = _dataset(cfg, args, split)
    ev = replace(cfg.eval, n_way=ckpt.params.arch.n_way)
    prov = {
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": file_sha256(args.checkpoint),
        "manifest": ckpt.extra.get("manifest", ""),
        "config": to_dict(cfg),
        "split": split,
        "dataset_sha256": index.fingerprint(),
    }
    return cfg, ckpt, index, ev, prov


def _default_out(args, name):
    return Path(args.out) if args.out else Path(args.checkpoint).parent / name


# ---------------------------------------------------------------- commands

def cmd_make_fixture(args):
    from .fixture import make_fixture

    counts = None
    if args.splits:
        try:
            counts = tuple(int(x) for x in args.splits.split(","))
        except ValueError as exc:
            raise UsageError(f"--splits must be three integers, got {args.splits!r}") from exc
        if len(counts) != 3:
            raise UsageError("--splits needs exactly three counts")
    manifest = make_fixture(args.out, args.n_classes, args.images_per_class, args.size, counts,
                            args.seed, args.noise)
    print(f"wrote fixture dataset to {args.out} (manifest {manifest})")


def cmd_train(args):
    from .plotting import plot_training_curves
    from .train import meta_train, read_metrics

    overrides = list(args.overrides)
    if args.data:
        overrides.append(f"data.root={args.data}")
    if args.out:
        overrides.append(f"output_dir={args.out}")
    cfg = load_config(args.config, overrides)
    if not cfg.data.root:
        raise UsageError("no dataset given: pass --data or set data.root")
    manifest = cfg.data.manifest_path()
    need = cfg.data.k_shot + cfg.data.q_shot
    train_index = load_dataset(cfg.data.root, manifest, cfg.data.train_split, min_images=need)
    val_index = load_dataset(cfg.data.root, manifest, cfg.data.val_split) if cfg.train.val_tasks else None
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    ckpt = meta_train(cfg, train_index, val_index, out, resume=args.resume)
    plot_training_curves(read_metrics(out / "metrics.jsonl"), out / "training_curves.png")
    print(f"checkpoint: {ckpt}")


def cmd_eval(args):
    from .evaluate import MetaLearner, meta_test

    cfg, ckpt, index, ev, prov = _checkpoint_context(args)
    rec = meta_test(MetaLearner(ckpt.params, ev.inner_steps), index, ev, prov["checkpoint_sha256"][:16])
    out = _default_out(args, "eval.json")
    _write_json(out, {**prov, "metrics": rec.as_dict()})
    print(f"tasks={rec.tasks_evaluated} clean={rec.clean_accuracy:.4f}±{rec.ci95_halfwidth:.4f} "
          f"robust={rec.robust_accuracy:.4f}±{rec.robust_ci95_halfwidth:.4f} attack: {rec.attack}")


def cmd_attack(args):
    from .attacks import multiview_latent_attack, pgd_classwise, selfsup_attack_single
    from .objectives import inner_adapt

    cfg, ckpt, index, ev, prov = _checkpoint_context(args)
    rng = derive_rng(cfg.seed, 31, args.task)
    ep = sample_episode(index, ev.n_way, ev.k_shot, ev.q_shot, rng)
    meta = ckpt.params
    atk = cfg.attack
    seed = int(rng.integers(0, 2**63 - 1))
    if args.kind == "classwise":
        a = inner_adapt(meta, ep.support_images, ep.support_labels, ev.inner_steps,
                        phi_frozen=not meta.arch.adapt_head).detach()
        batch = pgd_classwise(a.logits, ep.query_images, ep.query_labels, atk, seed)
    else:
        s1, s2, q1, q2 = make_multiview(ep, cfg.augment, rng)
        a1 = inner_adapt(meta, s1, ep.support_labels, ev.inner_steps).detach()
        if args.kind == "multiview":
            a2 = inner_adapt(meta, s2, ep.support_labels, ev.inner_steps).detach()
            batch = multiview_latent_attack(a1.encode, a2.encode, q1, q2, atk, seed)
        else:
            batch = selfsup_attack_single(a1.encode, q1, q2, atk, seed)
    out = _default_out(args, "attack")
    out.mkdir(parents=True, exist_ok=True)
    arrays = {k: getattr(batch, k).numpy() for k in
              ("clean_view1", "adv_view1", "delta1", "clean_view2", "adv_view2", "delta2")
              if getattr(batch, k) is not None}
    np.savez(out / "adversarial_batch.npz", labels=ep.query_labels.numpy(), **arrays)
    with (out / "attack_trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iterate", "attack_loss"])
        for i, v in enumerate(batch.attack_loss_trace):
            w.writerow([i, f"{v:.9g}"])
    linf = max(float(arrays[k].__abs__().max()) for k in arrays if k.startswith("delta"))
    _write_json(out / "attack.json", {**prov, "kind": args.kind, "attack": atk.descriptor(),
                                      "max_abs_delta": linf, "trace": batch.attack_loss_trace})
    print(f"{args.kind} attack: max |delta| = {linf:.6f} (eps {atk.epsilon:.6f}); wrote {out}")


def cmd_cka(args):
    from .diagnostics import attack_cka_report, view_cka_report
    from .plotting import plot_cka_bars

    cfg, ckpt, index, ev, prov = _checkpoint_context(args)
    n = cfg.diagnostics.cka_tasks
    views = view_cka_report(ckpt.params, index, ev, cfg.augment, n)
    attacks = attack_cka_report(ckpt.params, index, ev, cfg.augment, cfg.attack, n)
    out = _default_out(args, "cka")
    _write_json(out / "cka.json", {**prov, "views": views, "attacks": attacks})
    with (out / "cka.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["comparison", "mode", "mean_cka"])
        w.writerow(["view1_vs_view2", "bootstrapped", f"{views['bootstrapped']:.9g}"])
        w.writerow(["view1_vs_view2", "single_encoder", f"{views['single_encoder']:.9g}"])
        for k in ("multiview_latent", "single_encoder_latent", "classwise"):
            w.writerow(["clean_vs_adversarial", k, f"{attacks[k]:.9g}"])
    plot_cka_bars({"bootstrapped": views["bootstrapped"], "single_encoder": views["single_encoder"]},
                  out / "cka_views.png", "CKA between views")
    plot_cka_bars({k: attacks[k] for k in ("multiview_latent", "single_encoder_latent", "classwise")},
                  out / "cka_attacks.png", "CKA clean vs adversarial")
    print(f"view CKA: bootstrapped={views['bootstrapped']:.4f} single={views['single_encoder']:.4f}; "
          f"clean-vs-adv CKA: multiview={attacks['multiview_latent']:.4f} "
          f"classwise={attacks['classwise']:.4f}")


def cmd_loss_surface(args):
    from .diagnostics import loss_surface_grid
    from .objectives import inner_adapt
    from .plotting import plot_loss_surface

    cfg, ckpt, index, ev, prov = _checkpoint_context(args)
    rng = derive_rng(cfg.seed, 41, args.task)
    ep = sample_episode(index, ev.n_way, ev.k_shot, ev.q_shot, rng)
    meta = ckpt.params
    a = inner_adapt(meta, ep.support_images, ep.support_labels, ev.inner_steps,
                    phi_frozen=not meta.arch.adapt_head).detach()
    if not 0 <= args.image < len(ep.query_labels):
        raise UsageError(f"--image must be in 0..{len(ep.query_labels) - 1}")
    d = cfg.diagnostics
    grid = loss_surface_grid(a.logits, ep.query_images[args.image], int(ep.query_labels[args.image]),
                             int(rng.integers(0, 2**31)), d.surface_radius, d.surface_resolution)
    out = _default_out(args, "loss_surface")
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "loss_surface.csv", grid, delimiter=",", fmt="%.9g")
    plot_loss_surface(grid, d.surface_radius, out / "loss_surface.png", ep.query_records[args.image])
    _write_json(out / "loss_surface.json", {**prov, "image": ep.query_records[args.image],
                                            "radius": d.surface_radius, "resolution": d.surface_resolution,
                                            "center_loss": float(grid[d.surface_resolution, d.surface_resolution]),
                                            "max_loss": float(grid.max())})
    print(f"loss surface {grid.shape[0]}x{grid.shape[1]} written to {out}")


def cmd_obf_check(args):
    from .evaluate import MetaLearner, obfuscated_gradient_check

    cfg, ckpt, index, ev, prov = _checkpoint_context(args)
    report = obfuscated_gradient_check(MetaLearner(ckpt.params, ev.inner_steps), index, ev,
                                       cfg.diagnostics.obfuscation, prov["checkpoint_sha256"][:16])
    out = _default_out(args, "obf_check.json")
    _write_json(out, {**prov, **report})
    print(f"huge-eps robust={report['huge_epsilon']['robust_accuracy']:.4f} "
          f"[{'PASS' if report['huge_epsilon_pass'] else 'FAIL'}]  "
          f"parity gap={report['parity_gap']:.4f} [{'PASS' if report['parity_pass'] else 'FAIL'}]")


def cmd_export_embeddings(args):
    from .diagnostics import export_embeddings

    cfg, ckpt, index, ev, prov = _checkpoint_context(args)
    n = cfg.diagnostics.embedding_images if args.n_images is None else args.n_images
    if n < 0:
        raise UsageError("--n-images must be >= 0")
    out = _default_out(args, "embeddings.csv")
    export_embeddings(ckpt.params, index, n, ev, out, adversarial=not args.clean_only)
    _write_json(out.with_suffix(".json"), {**prov, "n_images": n, "adversarial": not args.clean_only})
    print(f"wrote {out}")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "cka": cmd_cka,
    "loss-surface": cmd_loss_surface,
    "obf-check": cmd_obf_check,
    "export-embeddings": cmd_export_embeddings,
    "make-fixture": cmd_make_fixture,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"mavrl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, SamplingError, OSError, ValueError, RuntimeError) as exc:
        print(f"mavrl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
