import json
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mavrl.data import (
    AugmentationPolicy,
    DatasetError,
    SamplingError,
    augment_view,
    derive_rng,
    load_dataset,
    make_multiview,
    read_manifest,
    sample_episode,
    write_manifest,
)
from mavrl.fixture import draw_image, make_fixture

GOLDEN = Path(__file__).parent / "data" / "augment_golden.npz"


def golden_batch():
    rng = np.random.default_rng(11)
    shapes = ["disc", "square", "triangle", "cross", "ring", "diamond"]
    colours = ["red", "green", "blue", "yellow", "cyan", "magenta"]
    imgs = [draw_image(s, c, 16, rng) for s, c in zip(shapes, colours)]
    return torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).copy())


# ---------------------------------------------------------------- loading

def test_fixture_counts_match_generator_record(tmp_path):
    manifest = make_fixture(tmp_path, n_classes=8, images_per_class=6, seed=1)
    record = json.loads((tmp_path / "fixture.json").read_text())
    total = 0
    for split in ("meta-train", "meta-val", "meta-test"):
        idx = load_dataset(tmp_path, manifest, split)
        assert len(idx) == record["splits"][split]
        assert all(len(v) == 6 for v in idx.classes.values())
        total += len(idx)
    assert total == 8


def test_cifar_fs_style_split(tmp_path):
    names = [f"c{i:03d}" for i in range(100)]
    sections = {"meta-train": names[:64], "meta-val": names[64:80], "meta-test": names[80:]}
    write_manifest(tmp_path / "splits.txt", sections)
    for n in names:
        (tmp_path / n).mkdir()
        img = np.full((4, 4, 3), 128, np.uint8)
        from PIL import Image
        Image.fromarray(img).save(tmp_path / n / "0.png")
    counts = [len(load_dataset(tmp_path, tmp_path / "splits.txt", s)) for s in sections]
    assert counts == [64, 16, 20]


def test_manifest_round_trip(tmp_path):
    sections = {"meta-train": ["a", "b"], "meta-val": ["c"], "meta-test": ["d", "e"]}
    write_manifest(tmp_path / "m.txt", sections)
    assert read_manifest(tmp_path / "m.txt") == sections


def test_manifest_duplicate_class_rejected(tmp_path):
    (tmp_path / "m.txt").write_text("[meta-train]\na\n[meta-test]\na\n")
    with pytest.raises(DatasetError, match="both"):
        read_manifest(tmp_path / "m.txt")


def test_manifest_unknown_section(tmp_path):
    (tmp_path / "m.txt").write_text("[train]\na\n")
    with pytest.raises(DatasetError, match="unknown split"):
        read_manifest(tmp_path / "m.txt")


def test_empty_split_rejected(tmp_path):
    (tmp_path / "m.txt").write_text("[meta-train]\na\n[meta-val]\n")
    with pytest.raises(DatasetError, match="empty split"):
        load_dataset(tmp_path, tmp_path / "m.txt", "meta-val")


def test_missing_class_dir(tmp_path):
    (tmp_path / "m.txt").write_text("[meta-train]\nghost\n")
    with pytest.raises(DatasetError, match="ghost"):
        load_dataset(tmp_path, tmp_path / "m.txt", "meta-train")


def test_undecodable_image(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "0.png").write_bytes(b"not a png")
    (tmp_path / "m.txt").write_text("[meta-train]\na\n")
    with pytest.raises(DatasetError, match="cannot decode"):
        load_dataset(tmp_path, tmp_path / "m.txt", "meta-train")


def test_too_few_images(fixture_dir):
    with pytest.raises(DatasetError, match="at least 50"):
        load_dataset(fixture_dir, fixture_dir / "splits.txt", "meta-train", min_images=50)


def test_shape_mismatch(fixture_dir):
    with pytest.raises(DatasetError, match="shape"):
        load_dataset(fixture_dir, fixture_dir / "splits.txt", "meta-train", image_shape=(32, 32, 3))


def test_fingerprint_stable(fixture_dir, train_index):
    again = load_dataset(fixture_dir, fixture_dir / "splits.txt", "meta-train")
    assert again.fingerprint() == train_index.fingerprint()
    assert len(train_index.fingerprint()) == 64


# ---------------------------------------------------------------- sampling

def test_episode_sizes(train_index):
    ep = sample_episode(train_index, 5, 5, 15, derive_rng(0))
    assert ep.support_images.shape == (25, 3, 16, 16)
    assert ep.query_images.shape == (75, 3, 16, 16)
    assert ep.support_labels.tolist() == [i for i in range(5) for _ in range(5)]
    assert ep.n_way == 5


def test_support_query_disjoint(train_index):
    for seed in range(20):
        ep = sample_episode(train_index, 5, 3, 4, derive_rng(seed))
        assert not set(ep.support_records) & set(ep.query_records)
        assert len(set(ep.class_map)) == 5


def test_episode_deterministic(train_index):
    a = sample_episode(train_index, 5, 2, 3, derive_rng(4, 1))
    b = sample_episode(train_index, 5, 2, 3, derive_rng(4, 1))
    assert a.support_records == b.support_records and a.query_records == b.query_records
    assert torch.equal(a.query_images, b.query_images)


def test_too_many_ways(train_index):
    with pytest.raises(SamplingError, match="only 5"):
        sample_episode(train_index, 6, 1, 1, derive_rng(0))


def test_too_many_shots(train_index):
    with pytest.raises(SamplingError, match="needs 25"):
        sample_episode(train_index, 2, 10, 15, derive_rng(0))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 5), k=st.integers(1, 6), q=st.integers(0, 6), seed=st.integers(0, 2**32))
def test_episode_label_structure(train_index, n, k, q, seed):
    ep = sample_episode(train_index, n, k, q, derive_rng(seed))
    assert ep.support_labels.bincount(minlength=n).tolist() == [k] * n
    if q:
        assert ep.query_labels.bincount(minlength=n).tolist() == [q] * n
    assert len(ep.support_records) == n * k and len(ep.query_records) == n * q


# ---------------------------------------------------------------- augmentation

def test_identity_policy_returns_raw(train_index):
    ep = sample_episode(train_index, 5, 2, 3, derive_rng(0))
    s1, s2, q1, q2 = make_multiview(ep, AugmentationPolicy.identity(), derive_rng(1))
    assert torch.equal(s1, ep.support_images) and torch.equal(s2, ep.support_images)
    assert torch.equal(q1, ep.query_images) and torch.equal(q2, ep.query_images)


def test_default_policy_changes_pixels(train_index):
    ep = sample_episode(train_index, 5, 2, 3, derive_rng(0))
    s1, s2, q1, q2 = make_multiview(ep, AugmentationPolicy(), derive_rng(1))
    assert (s1 - s2).abs().max() > 0
    assert (q1 - ep.query_images).abs().max() > 0


def test_views_stay_in_pixel_range():
    x = golden_batch()
    for seed in range(10):
        v = augment_view(x, AugmentationPolicy(gaussian_blur_prob=0.5), derive_rng(seed))
        assert v.shape == x.shape and v.min() >= 0 and v.max() <= 1


def test_augment_does_not_mutate_input():
    x = golden_batch()
    before = x.clone()
    augment_view(x, AugmentationPolicy(), derive_rng(0))
    assert torch.equal(x, before)


def test_flip_only_is_exact_mirror():
    x = golden_batch()
    p = AugmentationPolicy(crop_scale_range=(1.0, 1.0), color_jitter_prob=0, hflip_prob=1.0,
                           grayscale_prob=0, solarize_prob_range=(0.0, 0.0))
    assert torch.equal(augment_view(x, p, derive_rng(0)), x.flip(-1))


def test_grayscale_only_equalises_channels():
    x = golden_batch()
    p = AugmentationPolicy(crop_scale_range=(1.0, 1.0), color_jitter_prob=0, hflip_prob=0,
                           grayscale_prob=1.0, solarize_prob_range=(0.0, 0.0))
    v = augment_view(x, p, derive_rng(0))
    assert torch.allclose(v[:, 0], v[:, 1]) and torch.allclose(v[:, 1], v[:, 2])


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(crop_scale_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentationPolicy(hflip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentationPolicy(solarize_prob_range=(0.3, 0.1))


def test_default_policy_golden():
    x = golden_batch()
    got = augment_view(x, AugmentationPolicy(), derive_rng(2024)).numpy()
    ref = np.load(GOLDEN)
    np.testing.assert_allclose(x.numpy(), ref["input"], atol=0)
    np.testing.assert_allclose(got, ref["output"], atol=1e-5)
