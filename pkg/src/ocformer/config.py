"""Run configuration: one nested JSON document with validated defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple

from .core import SystemConfig
from .errors import ConfigError
from .experiments import DatasetSpec


@dataclass(frozen=True)
class QuantizationSection:
    n: int = 10
    ell: int = 20

    def __post_init__(self):
        if self.n < 1 or self.ell < 1:
            raise ConfigError("quantization levels n and ell must be >= 1")


@dataclass(frozen=True)
class ActionSection:
    mode: str = "sample"
    size: int = 10
    seed: int = 0
    resolution: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("sample", "grid"):
            raise ConfigError(f"unknown action mode {self.mode!r}")
        if self.mode == "sample" and self.size < 1:
            raise ConfigError("action net size must be >= 1")
        if self.mode == "grid" and (self.resolution is None or self.resolution < 1):
            raise ConfigError("grid action nets need resolution >= 1")


@dataclass(frozen=True)
class DatasetSection:
    K_train: int = 35
    K_test: int = 15
    seed: int = 0
    beta_target: float = 0.3

    def __post_init__(self):
        if self.K_train < 1 or self.K_test < 1:
            raise ConfigError("K_train and K_test must be >= 1")
        if not self.beta_target > 0:
            raise ConfigError("beta_target must be positive")


@dataclass(frozen=True)
class SweepSection:
    levels: Tuple[int, ...] = tuple(range(10, 101, 10))

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        if not levels or levels[0] < 1 or list(levels) != sorted(set(levels)):
            raise ConfigError("sweep levels must be positive and strictly increasing")
        object.__setattr__(self, "levels", levels)


@dataclass(frozen=True)
class RobustnessSection:
    sizes: Tuple[int, ...] = (5, 15, 35)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    truth_size: int = 200
    truth_seed: int = 10_000
    net_size: int = 20

    def __post_init__(self):
        sizes = tuple(int(v) for v in self.sizes)
        if not sizes or sizes[0] < 1 or list(sizes) != sorted(set(sizes)):
            raise ConfigError("robustness sizes must be positive and strictly increasing")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.truth_size < 1 or self.net_size < 1:
            raise ConfigError("truth_size and net_size must be >= 1")


_SECTIONS = {
    "quantization": QuantizationSection,
    "actions": ActionSection,
    "dataset": DatasetSection,
    "sweep": SweepSection,
    "robustness": RobustnessSection,
}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    quantization: QuantizationSection = field(default_factory=QuantizationSection)
    actions: ActionSection = field(default_factory=ActionSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    robustness: RobustnessSection = field(default_factory=RobustnessSection)
    out_dir: str = "out"
    budget: Optional[int] = None

    def __post_init__(self):
        if self.budget is not None and self.budget < 1:
            raise ConfigError("budget must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
        kwargs = {}
        if "system" in data:
            kwargs["system"] = _build(SystemConfig, data["system"], "system")
        for name, section in _SECTIONS.items():
            if name in data:
                kwargs[name] = _build(section, data[name], name)
        for name in ("out_dir", "budget"):
            if name in data:
                kwargs[name] = data[name]
        return cls(**kwargs)

    def to_dict(self) -> dict:
        """Fully resolved config, suitable for echoing into outputs."""
        out = {"system": self.system.to_dict()}
        for name in _SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        out["out_dir"] = self.out_dir
        out["budget"] = self.budget
        return out

    def dataset_spec(self) -> DatasetSpec:
        ds = self.dataset
        return DatasetSpec(
            N=self.system.N,
            d=self.system.d,
            K_train=ds.K_train,
            K_test=ds.K_test,
            seed=ds.seed,
            beta_target=ds.beta_target,
        )


def load_config(path: Optional[str]) -> RunConfig:
    """Read a JSON config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(data)


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
