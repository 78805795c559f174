import json

import pytest
import torch

from mavrl.config import load_config
from mavrl.fixture import make_fixture
from mavrl.data import load_dataset
from mavrl.model import init_params, load_checkpoint
from mavrl.train import meta_train, read_metrics

TINY = ["arch.widths=[8,8,8,8]", "data.q_shot=3", "attack.steps=1", "train.val_tasks=5",
        "train.val_every=50", "augment.crop_scale_range=[0.6,1.0]"]


def tiny_cfg(fixture_dir, *extra):
    return load_config(None, [f"data.root={fixture_dir}", *TINY, *extra])


def entries_close(a, b, tol=1e-6):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.keys() == y.keys()
        for k in x:
            if k in ("wall_time", "run"):
                continue
            if isinstance(x[k], float):
                assert abs(x[k] - y[k]) <= tol, (k, x, y)
            else:
                assert x[k] == y[k]


def test_zero_steps_writes_initial_checkpoint(fixture_dir, train_index, tmp_path):
    cfg = tiny_cfg(fixture_dir, "train.steps=0")
    path = meta_train(cfg, train_index, None, tmp_path)
    ck = load_checkpoint(path)
    ref = init_params(ck.params.arch, cfg.train.inner_lr0, cfg.seed)
    assert ck.step == 0
    for k, v in ref.named().items():
        assert torch.equal(v, ck.params.named()[k]), k
    assert read_metrics(tmp_path / "metrics.jsonl") == []
    assert (tmp_path / "manifest.json").exists()


def test_outputs_and_log_structure(fixture_dir, train_index, tmp_path):
    val = load_dataset(fixture_dir, fixture_dir / "splits.txt", "meta-val")
    cfg = tiny_cfg(fixture_dir, "train.steps=50")
    meta_train(cfg, train_index, val, tmp_path)
    for name in ("manifest.json", "metrics.jsonl", "last.ckpt", "best.ckpt"):
        assert (tmp_path / name).exists()
    recs = read_metrics(tmp_path / "metrics.jsonl")
    run = json.loads((tmp_path / "manifest.json").read_text())["id"]
    train = [r for r in recs if r["kind"] == "train"]
    assert [r["step"] for r in train] == list(range(1, 51))
    assert {"loss", "ce_view1", "kl_view1", "ce_view2", "kl_view2", "cos", "wall_time"} <= train[0].keys()
    assert all(r["run"] == run for r in recs)
    assert [r["step"] for r in recs if r["kind"] == "val"] == [50]
    ck = load_checkpoint(tmp_path / "last.ckpt")
    assert ck.step == 50 and ck.extra["manifest"] == run


@pytest.mark.slow
def test_training_log_reproducible(fixture_dir, train_index, tmp_path):
    cfg = tiny_cfg(fixture_dir, "train.steps=300", "train.val_every=100")
    val = load_dataset(fixture_dir, fixture_dir / "splits.txt", "meta-val")
    meta_train(cfg, train_index, val, tmp_path / "a")
    meta_train(cfg, train_index, val, tmp_path / "b")
    entries_close(read_metrics(tmp_path / "a" / "metrics.jsonl"), read_metrics(tmp_path / "b" / "metrics.jsonl"))
    # checkpoints name their manifest, whose id covers a creation timestamp; compare the weights
    a, b = load_checkpoint(tmp_path / "a" / "last.ckpt"), load_checkpoint(tmp_path / "b" / "last.ckpt")
    for k, v in a.params.named().items():
        assert torch.equal(v, b.params.named()[k]), k


def test_resume_continues_identically(fixture_dir, train_index, tmp_path):
    val = load_dataset(fixture_dir, fixture_dir / "splits.txt", "meta-val")
    full = tiny_cfg(fixture_dir, "train.steps=60", "train.val_every=30")
    meta_train(full, train_index, val, tmp_path / "full")
    part = tiny_cfg(fixture_dir, "train.steps=30", "train.val_every=30")
    meta_train(part, train_index, val, tmp_path / "part")
    meta_train(full, train_index, val, tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
    entries_close(read_metrics(tmp_path / "full" / "metrics.jsonl"),
                  read_metrics(tmp_path / "part" / "metrics.jsonl"), tol=0.0)
    a, b = load_checkpoint(tmp_path / "full" / "last.ckpt"), load_checkpoint(tmp_path / "part" / "last.ckpt")
    for k, v in a.params.named().items():
        assert torch.equal(v, b.params.named()[k]), k


@pytest.mark.slow
def test_aq_loss_decreases_on_two_way_task(tmp_path):
    root = tmp_path / "fx2"
    make_fixture(root, n_classes=2, images_per_class=20, split_counts=(2, 0, 0), seed=1)
    index = load_dataset(root, root / "splits.txt", "meta-train")
    cfg = load_config(None, [f"data.root={root}", "data.n_way=2", "data.q_shot=5", "arch.widths=[8,8,8,8]",
                             "train.objective=aq", "train.steps=200", "train.outer_lr=0.05",
                             "train.inner_lr0=0.1", "attack.steps=2", "train.val_tasks=0"])
    meta_train(cfg, index, None, tmp_path / "run")
    losses = [r["loss"] for r in read_metrics(tmp_path / "run" / "metrics.jsonl")]
    assert len(losses) == 200
    # single episodes are noisy; compare 20-step averages at the ends
    assert sum(losses[-20:]) / 20 < sum(losses[:20]) / 20


def test_nonfinite_loss_aborts(fixture_dir, train_index, tmp_path, monkeypatch):
    import mavrl.train as tr
    real = tr.episode_objective

    def bad(*a, **k):
        loss, terms = real(*a, **k)
        return loss, {**terms, "cos": float("nan")}
    monkeypatch.setattr(tr, "episode_objective", bad)
    with pytest.raises(FloatingPointError, match="cos"):
        meta_train(tiny_cfg(fixture_dir, "train.steps=2"), train_index, None, tmp_path)
