"""Few-shot dataset ingestion, episodic sampling and two-view augmentation.

Datasets live on disk as one directory per class holding PNG images, plus a
plain-text split manifest::

    [meta-train]
    class_a
    class_b
    [meta-val]
    class_c
    [meta-test]
    class_d

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

SPLITS = ("meta-train", "meta-val", "meta-test")
IMAGE_SUFFIXES = (".png",)


class DatasetError(Exception):
    """Raised when a dataset directory or manifest cannot be used."""


class SamplingError(Exception):
    """Raised when an episode cannot be drawn from an index."""


@dataclass
class DatasetIndex:
    root: Path
    split: str
    classes: dict[str, list[str]]
    images: dict[str, np.ndarray]
    image_shape: tuple[int, int, int]
    domain_tag: str = ""

    @property
    def class_names(self) -> list[str]:
        return list(self.classes)

    def __len__(self) -> int:
        return len(self.classes)

    def fingerprint(self) -> str:
        """SHA-256 over class names, record names and pixel data."""
        h = hashlib.sha256()
        for name in self.classes:
            h.update(name.encode())
            for rec in self.classes[name]:
                h.update(rec.encode())
            h.update(np.ascontiguousarray(self.images[name]).tobytes())
        return h.hexdigest()


@dataclass
class EpisodeTask:
    support_images: torch.Tensor
    support_labels: torch.Tensor
    query_images: torch.Tensor
    query_labels: torch.Tensor
    class_map: list[str]
    support_records: list[str] = field(default_factory=list)
    query_records: list[str] = field(default_factory=list)

    @property
    def n_way(self) -> int:
        return len(self.class_map)


def read_manifest(path: str | Path) -> dict[str, list[str]]:
    sections: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: unknown split section {current!r}")
            sections.setdefault(current, [])
            continue
        if current is None:
            raise DatasetError(f"{path}:{lineno}: class name outside any split section")
        sections[current].append(line)
    seen: dict[str, str] = {}
    for split, names in sections.items():
        for name in names:
            if name in seen:
                raise DatasetError(f"class {name!r} listed in both {seen[name]} and {split}")
            seen[name] = split
    return sections


def write_manifest(path: str | Path, sections: dict[str, list[str]]) -> None:
    lines = []
    for split in SPLITS:
        if split in sections:
            lines.append(f"[{split}]")
            lines.extend(sections[split])
    Path(path).write_text("\n".join(lines) + "\n")


def _decode(path: Path, image_shape: tuple[int, int, int] | None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            channels = image_shape[2] if image_shape else 3
            im = im.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if image_shape is not None and arr.shape != tuple(image_shape):
        raise DatasetError(f"image {path} has shape {arr.shape}, expected {tuple(image_shape)}")
    return arr


def load_dataset(
    root: str | Path,
    split_manifest: str | Path,
    split: str,
    image_shape: tuple[int, int, int] | None = None,
    min_images: int = 1,
    domain_tag: str = "",
) -> DatasetIndex:
    """Load one split of a directory-per-class dataset into memory.

    ``image_shape`` is ``(height, width, channels)``; when omitted it is taken
    from the first decoded image and enforced for the rest.  Every class must
    hold at least ``min_images`` images (pass ``k_shot + q_shot``).
    """
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root)
    sections = read_manifest(split_manifest)
    names = sections.get(split, [])
    if not names:
        raise DatasetError(f"empty split {split!r} in {split_manifest}")

    classes: dict[str, list[str]] = {}
    images: dict[str, np.ndarray] = {}
    shape = tuple(image_shape) if image_shape is not None else None
    for name in names:
        cdir = root / name
        if not cdir.is_dir():
            raise DatasetError(f"missing class directory for class {name!r}: {cdir}")
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if len(files) < min_images:
            raise DatasetError(
                f"class {name!r} has {len(files)} images, at least {min_images} required"
            )
        arrays = []
        for p in files:
            arr = _decode(p, shape)
            shape = arr.shape
            arrays.append(arr)
        classes[name] = [f"{name}/{p.name}" for p in files]
        # stored channel-first for torch
        images[name] = np.stack(arrays).transpose(0, 3, 1, 2).copy()
    return DatasetIndex(
        root=root,
        split=split,
        classes=classes,
        images=images,
        image_shape=tuple(shape),
        domain_tag=domain_tag or root.name,
    )


def derive_rng(*key: int) -> np.random.Generator:
    """Independent generator for an integer key path, e.g. (seed, step, episode)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def sample_episode(
    index: DatasetIndex, n_way: int, k_shot: int, q_shot: int, rng: np.random.Generator
) -> EpisodeTask:
    if n_way < 1 or k_shot < 1 or q_shot < 0:
        raise SamplingError(f"invalid episode shape n={n_way} k={k_shot} q={q_shot}")
    names = index.class_names
    if n_way > len(names):
        raise SamplingError(f"requested {n_way} classes, only {len(names)} available")
    need = k_shot + q_shot
    chosen = rng.choice(len(names), size=n_way, replace=False)
    s_img, q_img, s_rec, q_rec, class_map = [], [], [], [], []
    for cid in chosen:
        name = names[int(cid)]
        count = len(index.classes[name])
        if count < need:
            raise SamplingError(f"class {name!r} has {count} images, episode needs {need}")
        pick = rng.permutation(count)[:need]
        arr = index.images[name]
        s_img.append(arr[pick[:k_shot]])
        q_img.append(arr[pick[k_shot:]])
        s_rec.extend(index.classes[name][i] for i in pick[:k_shot])
        q_rec.extend(index.classes[name][i] for i in pick[k_shot:])
        class_map.append(name)
    c, h, w = index.images[names[0]].shape[1:]
    return EpisodeTask(
        support_images=torch.from_numpy(np.concatenate(s_img)),
        support_labels=torch.arange(n_way).repeat_interleave(k_shot),
        query_images=torch.from_numpy(np.concatenate(q_img)) if q_shot else torch.zeros(0, c, h, w),
        query_labels=torch.arange(n_way).repeat_interleave(q_shot),
        class_map=class_map,
        support_records=s_rec,
        query_records=q_rec,
    )


@dataclass
class AugmentationPolicy:
    crop_scale_range: tuple[float, float] = (0.08, 1.0)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    color_jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    hflip_prob: float = 0.5
    grayscale_prob: float = 0.2
    gaussian_blur_prob: float = 0.0
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    solarize_prob_range: tuple[float, float] = (0.0, 0.2)
    solarize_threshold: float = 0.5

    def __post_init__(self):
        self.crop_scale_range = tuple(self.crop_scale_range)
        self.crop_ratio_range = tuple(self.crop_ratio_range)
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        self.solarize_prob_range = tuple(self.solarize_prob_range)
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale_range must lie in (0, 1], got {self.crop_scale_range}")
        probs = [self.color_jitter_prob, self.hflip_prob, self.grayscale_prob,
                 self.gaussian_blur_prob, *self.solarize_prob_range]
        if any(not 0 <= p <= 1 for p in probs):
            raise ValueError("augmentation probabilities must lie in [0, 1]")
        if self.solarize_prob_range[0] > self.solarize_prob_range[1]:
            raise ValueError("solarize_prob_range must be ordered")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(crop_scale_range=(1.0, 1.0), color_jitter_prob=0.0, hflip_prob=0.0,
                   grayscale_prob=0.0, gaussian_blur_prob=0.0, solarize_prob_range=(0.0, 0.0))

    def is_identity(self) -> bool:
        return self == AugmentationPolicy.identity()


def _crop_boxes(n, h, w, scale, ratio, rng):
    """Random-resized-crop boxes as rows of (top, left, height, width) pixels.

    Ten candidate boxes per image; the first that fits wins, falling back to
    the full image when none does.
    """
    boxes = np.tile(np.array([0.0, 0.0, h, w]), (n, 1))
    if scale[0] >= 1.0:
        return boxes
    tries = 10
    target = h * w * rng.uniform(scale[0], scale[1], (n, tries))
    ar = np.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1]), (n, tries)))
    cw = np.round(np.sqrt(target * ar))
    ch = np.round(np.sqrt(target / ar))
    u = rng.random((n, tries, 2))
    ok = (cw > 0) & (cw <= w) & (ch > 0) & (ch <= h)
    first = np.argmax(ok, axis=1)
    rows = np.flatnonzero(ok.any(axis=1))
    k = first[rows]
    ch, cw = ch[rows, k], cw[rows, k]
    top = np.floor(u[rows, k, 0] * (h - ch + 1))
    left = np.floor(u[rows, k, 1] * (w - cw + 1))
    boxes[rows] = np.stack([top, left, ch, cw], axis=1)
    return boxes


def _gray(x):
    if x.shape[1] == 1:
        return x
    w = x.new_tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
    return (x * w).sum(1, keepdim=True).expand_as(x)


def _hue_rotate(x, angle):
    # rotation about the gray axis in YIQ space, per image angle in radians
    if x.shape[1] != 3:
        return x
    to_yiq = x.new_tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    from_yiq = torch.linalg.inv(to_yiq)
    c, s = torch.cos(angle), torch.sin(angle)
    one, zero = torch.ones_like(c), torch.zeros_like(c)
    rot = torch.stack([torch.stack([one, zero, zero], -1),
                       torch.stack([zero, c, -s], -1),
                       torch.stack([zero, s, c], -1)], -2)
    m = from_yiq @ rot @ to_yiq
    return torch.einsum("bij,bjhw->bihw", m, x)


def _blur(img, sigma):
    radius = max(1, int(math.ceil(2 * sigma)))
    t = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k = k / k.sum()
    c = img.shape[0]
    x = F.pad(img[None], (radius, radius, radius, radius), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x[0]


def augment_view(images: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Apply one stochastic augmentation draw to every image of a batch.

    All random parameters come from ``rng`` (numpy), so the result is a pure
    function of (images, policy, rng state).  Output keeps the input shape
    and stays inside [0, 1].
    """
    x = images
    n, c, h, w = x.shape
    if n == 0:
        return x.clone()

    boxes = _crop_boxes(n, h, w, policy.crop_scale_range, policy.crop_ratio_range, rng)
    flip = rng.random(n) < policy.hflip_prob
    resample = flip | (boxes[:, 2] != h) | (boxes[:, 3] != w)
    if resample.any():
        idx = np.flatnonzero(resample)
        top, left, ch, cw = (boxes[idx, j] for j in range(4))
        # affine map from output grid to the crop box, align_corners=False convention
        sx = cw / w
        sy = ch / h
        tx = (2 * left + cw) / w - 1
        ty = (2 * top + ch) / h - 1
        sx = np.where(flip[idx], -sx, sx)
        theta = np.zeros((len(idx), 2, 3))
        theta[:, 0, 0] = sx
        theta[:, 0, 2] = tx
        theta[:, 1, 1] = sy
        theta[:, 1, 2] = ty
        theta = torch.as_tensor(theta, dtype=x.dtype)
        sub = x[torch.as_tensor(idx)]
        grid = F.affine_grid(theta, list(sub.shape), align_corners=False)
        out = F.grid_sample(sub, grid, mode="bilinear", padding_mode="border", align_corners=False)
        x = x.clone()
        x[torch.as_tensor(idx)] = out
        # exact mirroring for pure flips so that flip∘flip is the identity
        pure_flip = flip & (boxes[:, 2] == h) & (boxes[:, 3] == w)
        if pure_flip.any():
            pf = torch.as_tensor(np.flatnonzero(pure_flip))
            x[pf] = images[pf].flip(-1)

    jitter = rng.random(n) < policy.color_jitter_prob
    b = rng.uniform(max(0.0, 1 - policy.brightness), 1 + policy.brightness, n)
    con = rng.uniform(max(0.0, 1 - policy.contrast), 1 + policy.contrast, n)
    sat = rng.uniform(max(0.0, 1 - policy.saturation), 1 + policy.saturation, n)
    hue = rng.uniform(-policy.hue, policy.hue, n)
    gray = rng.random(n) < policy.grayscale_prob
    blur = rng.random(n) < policy.gaussian_blur_prob
    sigma = rng.uniform(*policy.blur_sigma_range, n)
    solar_p = rng.uniform(*policy.solarize_prob_range)
    solar = rng.random(n) < solar_p

    if jitter.any():
        x = x.clone() if x is images else x
        j = torch.as_tensor(np.flatnonzero(jitter))
        sub = x[j]
        bt = torch.as_tensor(b[jitter], dtype=x.dtype).view(-1, 1, 1, 1)
        ct = torch.as_tensor(con[jitter], dtype=x.dtype).view(-1, 1, 1, 1)
        st = torch.as_tensor(sat[jitter], dtype=x.dtype).view(-1, 1, 1, 1)
        sub = (sub * bt).clamp(0, 1)
        mean = _gray(sub).mean(dim=(1, 2, 3), keepdim=True)
        sub = (ct * sub + (1 - ct) * mean).clamp(0, 1)
        sub = (st * sub + (1 - st) * _gray(sub)).clamp(0, 1)
        sub = _hue_rotate(sub, torch.as_tensor(hue[jitter] * 2 * math.pi, dtype=x.dtype)).clamp(0, 1)
        x[j] = sub
    if gray.any():
        x = x.clone() if x is images else x
        g = torch.as_tensor(np.flatnonzero(gray))
        x[g] = _gray(x[g]).contiguous()
    if blur.any():
        x = x.clone() if x is images else x
        for i in np.flatnonzero(blur):
            x[i] = _blur(x[i], float(sigma[i]))
    if solar.any():
        x = x.clone() if x is images else x
        s = torch.as_tensor(np.flatnonzero(solar))
        sub = x[s]
        x[s] = torch.where(sub >= policy.solarize_threshold, 1 - sub, sub)
    if x is images:
        x = x.clone()
    return x.clamp_(0, 1)


def make_multiview(episode: EpisodeTask, policy: AugmentationPolicy, rng: np.random.Generator):
    """Two independent augmentation draws per (set, view).

    Returns ``(t1_support, t2_support, t1_query, t2_query)``.  Each of the
    four draws gets its own child generator so adding images to one set never
    shifts the randomness of another.
    """
    seeds = rng.integers(0, 2**63 - 1, size=4)
    s1 = augment_view(episode.support_images, policy, np.random.default_rng(seeds[0]))
    s2 = augment_view(episode.support_images, policy, np.random.default_rng(seeds[1]))
    q1 = augment_view(episode.query_images, policy, np.random.default_rng(seeds[2]))
    q2 = augment_view(episode.query_images, policy, np.random.default_rng(seeds[3]))
    return s1, s2, q1, q2
