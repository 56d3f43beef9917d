"""YAML run configuration with strict key checking."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import augment, load_cifar10, synth_dataset
from .search import SearchConfig


class ConfigError(ValueError):
    pass


def _strict(cls, d, section: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}") from None


def _plain(obj) -> dict:
    d = asdict(obj)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


@dataclass
class DataConfig:
    source: str = "synthetic"
    kind: str = "image"
    num_classes: int = 10
    n: int = 200
    shape: list = field(default_factory=lambda: [3, 16, 16])
    seed: int = 0
    noise: float = 0.1
    test_fraction: float = 0.2
    dir: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ValueError(f"source must be 'synthetic' or 'cifar10', got {self.source!r}")
        if self.source == "cifar10" and not self.dir:
            raise ValueError("cifar10 needs 'dir'")

    def load(self):
        if self.source == "cifar10":
            return load_cifar10(self.dir)
        return synth_dataset(self.kind, self.num_classes, self.n, self.shape, self.seed, self.noise,
                             self.test_fraction)


@dataclass
class NetworkConfig:
    target: str | None = None
    K: int = 2
    C1: int = 16
    C2: int = 64
    classes: int | None = None
    reductions: list | None = None
    stem_stride: list | None = None
    stem_pool: bool | None = None


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    seed: int = 0
    augment: bool = False

    def augmenter(self):
        if not self.augment:
            return None
        return lambda s, rng: augment(s, s.shape[-2:], "train", rng)


@dataclass
class OutputConfig:
    dir: str = "runs/search"


SECTIONS = {"search": SearchConfig, "network": NetworkConfig, "data": DataConfig, "train": TrainConfig,
            "output": OutputConfig}


@dataclass
class RunConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping of sections")
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        return cls(**{name: _strict(kind, d.get(name), name) for name, kind in SECTIONS.items()})

    def to_dict(self) -> dict:
        return {"search": self.search.to_dict(), "network": _plain(self.network), "data": _plain(self.data),
                "train": _plain(self.train), "output": _plain(self.output)}

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(raw)
