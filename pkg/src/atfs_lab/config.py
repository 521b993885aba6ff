"""Run configuration: JSON document validated against schema v1.

A config has optional sections ``dataset``, ``model``, ``train``, ``eval``,
``analysis`` and ``output_dir``; missing fields take the dataclass defaults.
Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import jsonschema

from .analysis import ThicknessConfig
from .data import DatasetSpec
from .files import canonical_json
from .models import ModelSpec
from .training import AttackSpec, TrainConfig, default_suite

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "<root>"):
        super().__init__(f"{path}: {message}")
        self.path = path


def load_schema() -> dict:
    return json.loads(resources.files("atfs_lab").joinpath("config.schema.json").read_text())


@dataclass(frozen=True)
class EvalConfig:
    suite: tuple = field(default_factory=lambda: tuple(default_suite()))
    batch_size: int = 500
    split: str = "test"


@dataclass(frozen=True)
class AnalysisConfig:
    thickness: ThicknessConfig = field(default_factory=ThicknessConfig)
    attack: AttackSpec = field(default_factory=lambda: default_suite()[1])
    split: str = "test"
    max_samples: int | None = None


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        d["train"] = self.train.to_dict()
        d["eval"]["suite"] = [asdict(s) for s in self.eval.suite]
        return d

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        """Short hash of the canonical config, used to key run directories."""
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


def _pointer(err: jsonschema.ValidationError) -> str:
    return "config" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)


def validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _pointer(err))


def _section(cls, d: dict, path: str):
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), path) from e


def from_dict(raw: dict) -> RunConfig:
    validate(raw)
    raw = copy.deepcopy(raw)
    raw.pop("schema_version", None)
    dataset = _section(DatasetSpec, raw.get("dataset", {}), "config.dataset")
    model = _section(ModelSpec, raw.get("model", {}), "config.model")
    try:
        train = TrainConfig.from_dict(raw.get("train", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), "config.train") from e
    ev = dict(raw.get("eval", {}))
    if "suite" in ev:
        ev["suite"] = tuple(_section(AttackSpec, s, f"config.eval.suite[{i}]") for i, s in enumerate(ev["suite"]))
    evaluation = _section(EvalConfig, ev, "config.eval")
    an = dict(raw.get("analysis", {}))
    if "thickness" in an:
        an["thickness"] = _section(ThicknessConfig, an["thickness"], "config.analysis.thickness")
    if "attack" in an:
        an["attack"] = _section(AttackSpec, an["attack"], "config.analysis.attack")
    analysis = _section(AnalysisConfig, an, "config.analysis")
    return RunConfig(dataset=dataset, model=model, train=train, eval=evaluation, analysis=analysis,
                     output_dir=raw.get("output_dir", "runs"))


def load(path) -> RunConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from e
    return from_dict(raw)


def set_path(raw: dict, dotted: str, value) -> dict:
    """Return a copy of ``raw`` with ``a.b.c = value``."""
    out = copy.deepcopy(raw)
    node = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not a section", f"config.{dotted}")
    node[keys[-1]] = value
    return out


def parse_value(text: str):
    """Override values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]
