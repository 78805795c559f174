"""Functional encoder/classifier networks and the meta-parameter container.

Networks are written as pure functions of an explicit parameter dict so the
same code serves the meta-initialisation, inner-adapted copies and the
finite-difference oracles in the test-suite.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

Params = "OrderedDict[str, torch.Tensor]"

FAMILIES = ("conv4-toy", "resnet12", "linear")
# conv4-toy only; softplus keeps the second-order inner step smooth for gradient checks
ACTIVATIONS = {"relu": F.relu, "softplus": F.softplus}


class ShapeError(ValueError):
    pass


@dataclass
class ArchConfig:
    family: str = "conv4-toy"
    in_channels: int = 3
    image_size: int = 16
    widths: list[int] = field(default_factory=lambda: [16, 16, 16, 16])
    n_way: int = 5
    norm: str = "group"
    norm_groups: int = 4
    adapt_head: bool = False
    activation: str = "relu"

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if self.family not in FAMILIES:
            raise ValueError(f"unknown encoder family {self.family!r}; choose from {FAMILIES}")
        if self.norm not in ("group", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {tuple(ACTIVATIONS)}")
        if not self.widths or min(self.widths) <= 0:
            raise ValueError("widths must be positive")
        if self.n_way < 1:
            raise ValueError("n_way must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_size, self.image_size)


def _groups(arch: ArchConfig, channels: int) -> int:
    g = min(arch.norm_groups, channels)
    while channels % g:
        g -= 1
    return g


def _encoder_shapes(arch: ArchConfig) -> "OrderedDict[str, tuple]":
    shapes: OrderedDict[str, tuple] = OrderedDict()
    c = arch.in_channels
    if arch.family == "linear":
        shapes["enc.w"] = (arch.feature_dim, c * arch.image_size ** 2)
        shapes["enc.b"] = (arch.feature_dim,)
        return shapes
    for i, w in enumerate(arch.widths):
        convs = 1 if arch.family == "conv4-toy" else 3
        cin = c
        for j in range(convs):
            shapes[f"enc.b{i}.conv{j}.w"] = (w, cin, 3, 3)
            if arch.family == "conv4-toy":
                shapes[f"enc.b{i}.conv{j}.b"] = (w,)
            if arch.norm == "group":
                shapes[f"enc.b{i}.norm{j}.w"] = (w,)
                shapes[f"enc.b{i}.norm{j}.b"] = (w,)
            cin = w
        if arch.family == "resnet12":
            shapes[f"enc.b{i}.short.w"] = (w, c, 1, 1)
            if arch.norm == "group":
                shapes[f"enc.b{i}.shortnorm.w"] = (w,)
                shapes[f"enc.b{i}.shortnorm.b"] = (w,)
        c = w
    return shapes


def _norm(arch, x, theta, prefix):
    if arch.norm == "none":
        return x
    return F.group_norm(x, _groups(arch, x.shape[1]), theta[prefix + ".w"], theta[prefix + ".b"])


def encode(theta, images: torch.Tensor, arch: ArchConfig) -> torch.Tensor:
    """Feature batch ``[B, feature_dim]`` for images ``[B, C, H, W]`` in [0, 1]."""
    if images.dim() != 4 or tuple(images.shape[1:]) != arch.input_shape:
        raise ShapeError(
            f"encoder expects images of shape [B, {', '.join(map(str, arch.input_shape))}], "
            f"got {list(images.shape)}"
        )
    x = images
    if arch.family == "linear":
        return F.linear(x.flatten(1), theta["enc.w"], theta["enc.b"])
    for i in range(len(arch.widths)):
        if arch.family == "conv4-toy":
            # downsample to 2x2 at most so group norm always sees spatial extent
            stride = 2 if x.shape[-1] > 2 else 1
            x = F.conv2d(x, theta[f"enc.b{i}.conv0.w"], theta[f"enc.b{i}.conv0.b"], stride=stride, padding=1)
            x = _norm(arch, x, theta, f"enc.b{i}.norm0")
            x = ACTIVATIONS[arch.activation](x)
            continue
        short = F.conv2d(x, theta[f"enc.b{i}.short.w"])
        short = _norm(arch, short, theta, f"enc.b{i}.shortnorm")
        h = x
        for j in range(3):
            h = F.conv2d(h, theta[f"enc.b{i}.conv{j}.w"], padding=1)
            h = _norm(arch, h, theta, f"enc.b{i}.norm{j}")
            if j < 2:
                h = F.leaky_relu(h, 0.1)
        x = F.leaky_relu(h + short, 0.1)
        if x.shape[-1] >= 2:
            x = F.max_pool2d(x, 2)
    return x.mean(dim=(2, 3))


def classify(phi, features: torch.Tensor) -> torch.Tensor:
    """Linear head: ``features @ W.T + b``."""
    w = phi["head.w"]
    if features.dim() != 2 or features.shape[1] != w.shape[1]:
        raise ShapeError(f"classifier expects features [B, {w.shape[1]}], got {list(features.shape)}")
    return F.linear(features, w, phi["head.b"])


@dataclass
class MetaParams:
    """Shared initialisation: encoder ``theta``, head ``phi``, per-element inner rates ``alpha``.

    ``alpha`` is keyed by the names of the adapted parameters: the encoder
    entries always, plus the head entries when ``arch.adapt_head`` is set.
    """

    arch: ArchConfig
    theta: OrderedDict
    phi: OrderedDict
    alpha: OrderedDict

    def adapted_names(self) -> list[str]:
        return list(self.alpha)

    def named(self) -> "OrderedDict[str, torch.Tensor]":
        out = OrderedDict()
        for group in ("theta", "phi", "alpha"):
            for k, v in getattr(self, group).items():
                out[f"{group}/{k}"] = v
        return out

    def tensors(self) -> list[torch.Tensor]:
        return list(self.named().values())

    @classmethod
    def from_named(cls, arch: ArchConfig, named) -> "MetaParams":
        groups = {"theta": OrderedDict(), "phi": OrderedDict(), "alpha": OrderedDict()}
        for key, v in named.items():
            group, name = key.split("/", 1)
            groups[group][name] = v
        return cls(arch, groups["theta"], groups["phi"], groups["alpha"])

    def map(self, fn) -> "MetaParams":
        return MetaParams.from_named(self.arch, OrderedDict((k, fn(v)) for k, v in self.named().items()))

    def detach(self) -> "MetaParams":
        return self.map(lambda t: t.detach().clone())

    def requires_grad_(self, flag: bool = True) -> "MetaParams":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def to(self, dtype) -> "MetaParams":
        return self.map(lambda t: t.detach().to(dtype))

    def num_parameters(self, include_alpha: bool = False) -> int:
        groups = [self.theta, self.phi] + ([self.alpha] if include_alpha else [])
        return sum(t.numel() for g in groups for t in g.values())

    def network(self) -> "Network":
        return Network(self.arch)


class Network:
    """Binds an architecture to the functional encode/classify pair."""

    def __init__(self, arch: ArchConfig):
        self.arch = arch

    def encode(self, theta, images):
        return encode(theta, images, self.arch)

    def classify(self, phi, features):
        return classify(phi, features)

    def logits(self, theta, phi, images):
        return classify(phi, encode(theta, images, self.arch))


def init_params(arch: ArchConfig, inner_lr0: float, rng: int | torch.Generator = 0,
                dtype=torch.float32) -> MetaParams:
    """Kaiming-normal convolutions (std = sqrt(2 / fan_in)), unit norm gains, zero biases.

    The head uses std = sqrt(1 / fan_in).  Every alpha entry starts at
    ``inner_lr0``.
    """
    if inner_lr0 <= 0:
        raise ValueError("inner_lr0 must be positive")
    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(int(rng))
    theta = OrderedDict()
    for name, shape in _encoder_shapes(arch).items():
        if name.endswith(".b"):
            theta[name] = torch.zeros(shape, dtype=dtype)
        elif ".norm" in name or ".shortnorm" in name:
            theta[name] = torch.ones(shape, dtype=dtype)
        else:
            fan_in = math.prod(shape[1:])
            theta[name] = torch.randn(shape, generator=gen, dtype=dtype) * math.sqrt(2.0 / fan_in)
    d = arch.feature_dim
    phi = OrderedDict(
        [("head.w", torch.randn((arch.n_way, d), generator=gen, dtype=dtype) * math.sqrt(1.0 / d)),
         ("head.b", torch.zeros(arch.n_way, dtype=dtype))]
    )
    adapted = list(theta.items()) + (list(phi.items()) if arch.adapt_head else [])
    alpha = OrderedDict((k, torch.full_like(v, float(inner_lr0))) for k, v in adapted)
    return MetaParams(arch, theta, phi, alpha)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"MAVRLCKPT\n"
CHECKPOINT_VERSION = 1
_DTYPES = {torch.float32: "float32", torch.float64: "float64"}


@dataclass
class Checkpoint:
    params: MetaParams
    step: int = 0
    optimizer_state: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    """Write the container and return its SHA-256 hex digest.

    Layout: magic, little-endian u64 header length, JSON header, raw tensor
    bytes in header order.
    """
    entries, blobs, offset = [], [], 0
    named = ckpt.params.named()
    for key, t in list(named.items()) + [(f"optim/{k}", v) for k, v in ckpt.optimizer_state.items()]:
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": key, "shape": list(arr.shape), "dtype": _DTYPES[t.dtype],
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(ckpt.params.arch),
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    hbytes = _dumps(header)
    data = CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    named, optim = OrderedDict(), {}
    for e in header["tensors"]:
        raw = data[pos + e["offset"]: pos + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        t = torch.from_numpy(arr.astype(e["dtype"]))
        if e["name"].startswith("optim/"):
            optim[e["name"][6:]] = t
        else:
            named[e["name"]] = t
    arch = ArchConfig(**header["arch"])
    return Checkpoint(MetaParams.from_named(arch, named), header["step"], optim,
                      header["rng_state"], header["extra"])


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
