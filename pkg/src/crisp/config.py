"""Run configuration: one JSON document with a section per pipeline stage.

Loading rejects unknown keys at every level and fills in every default, so
``dump(load(text))`` is a complete, self-describing record of the run.
"""

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .adapter import AdaptConfig
from .compressor import CompressConfig, DistillConfig
from .errors import ConfigError
from .mimicry import MimicryConfig
from .recombinator import GateConfig
from .toy import SyntheticTask


@dataclass
class ModelSection:
    dims: list = field(default_factory=lambda: [16, 32, 32, 32, 4])
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.01
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ConfigError(f"model dims must list >= 2 positive sizes, got {self.dims}")


@dataclass
class FactorSection:
    r: int = 16
    s: int = 16
    group_size: int = 3
    exclude: list = field(default_factory=lambda: ["head"])

    def __post_init__(self):
        if self.r < 1 or self.s < 1 or self.group_size < 1:
            raise ConfigError("r, s and group_size must be >= 1")


@dataclass
class ShiftSection:
    rotation: float = 1.2
    label_shift: int = 1


@dataclass
class AblateSection:
    seeds: list = field(default_factory=lambda: [0])
    mixer_dims: list = field(default_factory=lambda: [[4, 16], [4, 4], [8, 16], [8, 4], [16, 8], [32, 16]])
    budget_ranks: list = field(default_factory=lambda: [1, 2, 4, 8])
    mimicry_steps: int = 1500


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    shift: ShiftSection = field(default_factory=ShiftSection)
    factorization: FactorSection = field(default_factory=FactorSection)
    gate: GateConfig = field(default_factory=GateConfig)
    mimicry: MimicryConfig = field(default_factory=MimicryConfig)
    compress: CompressConfig = field(default_factory=CompressConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    ablate: AblateSection = field(default_factory=AblateSection)

    @property
    def target_task(self):
        return self.task.shifted(self.shift.rotation, self.shift.label_shift)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        if value is None and defaults[name] is None:
            pass
        elif dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}.{name}")
        elif hint in (int, float, bool, str):
            value = _coerce(hint, value, f"{where}.{name}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _coerce(hint, value, where):
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if hint is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if hint is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if hint is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    if hint is float and not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    return value


def from_dict(data):
    return _build(RunConfig, data, "config")


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return from_dict(data)


def dumps(cfg):
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())

