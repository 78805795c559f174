"""Run configuration: nested dataclass sections loaded from YAML.

Unknown keys anywhere are a hard error.  ``--set section.key=value`` style
overrides are parsed with YAML scalar rules, so ``train.lam=6`` yields an
int-compatible number and ``arch.widths=[8,8,8,8]`` a list.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from . import __version__
from .attacks import AttackConfig
from .data import AugmentationPolicy
from .evaluate import EvalConfig, ObfuscationThresholds
from .model import ArchConfig
from .objectives import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""
    manifest: str = ""
    train_split: str = "meta-train"
    val_split: str = "meta-val"
    test_split: str = "meta-test"
    n_way: int = 5
    k_shot: int = 5
    q_shot: int = 15

    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.root) / "splits.txt"


@dataclass
class DiagnosticsConfig:
    surface_radius: float = 1.0
    surface_resolution: int = 20
    cka_tasks: int = 20
    embedding_images: int = 100
    obfuscation: ObfuscationThresholds = field(default_factory=ObfuscationThresholds)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    seed: int = 0
    output_dir: str = "runs/default"


def _build(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(sorted(f'{path}{k}' for k in unknown))}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {path or '<root>'}: {exc}") from exc


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v
    return conv(cfg)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {})


def set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else ""


def load_config(path: str | Path | None = None, overrides=()) -> RunConfig:
    """Defaults, then the YAML file (if any), then ``key=value`` overrides."""
    data = to_dict(RunConfig())
    if path is not None:
        text = Path(path).read_text() if Path(path).exists() else _shipped(str(path))
        loaded = yaml.safe_load(text) or {}
        _merge(data, loaded, "")
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _check_key(data, key)
        set_dotted(data, key, value)
    return from_dict(data)


def _check_key(data, key):
    node = data
    for p in key.split("."):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]


def _merge(base: dict, new: dict, path: str) -> None:
    if not isinstance(new, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


SHIPPED = ("paper-cifar-fs", "fixture-smoke")


def _shipped(name: str) -> str:
    stem = Path(name).stem if name.endswith((".yaml", ".yml")) else name
    if stem not in SHIPPED:
        raise ConfigError(f"config file {name!r} not found (shipped configs: {', '.join(SHIPPED)})")
    return resources.files("mavrl").joinpath("configs", f"{stem}.yaml").read_text()


def write_manifest(out_dir: str | Path, cfg: RunConfig, dataset_hashes: dict, extra: dict | None = None) -> str:
    """Write ``manifest.json`` once and return its id (short content hash).

    An existing manifest is never modified; its id is returned instead.
    """
    path = Path(out_dir) / "manifest.json"
    if path.exists():
        return json.loads(path.read_text())["id"]
    body = {
        "config": to_dict(cfg),
        "code_version": __version__,
        "dataset_hashes": dataset_hashes,
        "seed": cfg.seed,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        body.update(extra)
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
    body["id"] = digest
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return digest
