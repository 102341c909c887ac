"""Run configuration: one YAML file, flat ``--section.field`` overrides, all-at-once validation."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .train import TrainConfig

EXTRACTION_FORMATS = ("funsd", "cord", "cord-coarse")


class ConfigError(ValueError):
    """Validation failure; ``problems`` lists every issue found."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class DataConfig:
    classification: str | None = None
    extraction: str | None = None
    extraction_format: str = "funsd"
    qa: str | None = None
    instructions: str | None = None
    skip_bad_records: bool = False

    def validate(self, need_files: bool = True) -> list[str]:
        problems = []
        if self.extraction_format not in EXTRACTION_FORMATS:
            problems.append(f"data.extraction_format must be one of {EXTRACTION_FORMATS}")
        if not need_files:
            return problems
        paths = {k: getattr(self, k) for k in ("classification", "extraction", "qa", "instructions")}
        if not any(paths.values()):
            problems.append("data: at least one of classification, extraction, qa, instructions must be set")
        for name, p in paths.items():
            if p is not None and not Path(p).is_file():
                problems.append(f"data.{name}: no such file {p}")
        return problems


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    def validate(self, check_paths: bool = True) -> list[str]:
        problems = self.encoder.validate() + self.decoder.validate() + self.train.validate()
        problems += self.data.validate(need_files=check_paths)
        if not self.output_dir:
            problems.append("output_dir must not be empty")
        return problems

    def check(self, check_paths: bool = True) -> RunConfig:
        problems = self.validate(check_paths)
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


SECTIONS = {"encoder": EncoderConfig, "decoder": DecoderConfig, "train": TrainConfig, "data": DataConfig}


def _scalar_type(cls, name):
    hint = typing.get_type_hints(cls)[name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    return (args[0] if args else hint), type(None) in typing.get_args(hint)


def coerce(cls, name: str, value, where: str):
    """Check/convert one field value; raises ValueError with a readable message."""
    typ, optional = _scalar_type(cls, name)
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null") and optional):
        if optional:
            return None
        raise ValueError(f"{where} may not be null")
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ValueError(f"{where} must be a boolean, got {value!r}")
    if typ is int:
        if isinstance(value, bool):
            raise ValueError(f"{where} must be an integer, got {value!r}")
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ValueError(f"{where} must be an integer, got {value!r}") from None
    if typ is float:
        if isinstance(value, bool):
            raise ValueError(f"{where} must be a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ValueError(f"{where} must be a number, got {value!r}") from None
    if not isinstance(value, str):
        raise ValueError(f"{where} must be a string, got {value!r}")
    return value


def from_dict(raw: dict | None, problems: list[str] | None = None) -> RunConfig:
    """Build a RunConfig, collecting unknown keys and type errors into ``problems``."""
    own = problems is None
    problems = [] if own else problems
    raw = dict(raw or {})
    cfg = RunConfig()
    for key, value in raw.items():
        if key == "output_dir":
            try:
                cfg.output_dir = coerce(RunConfig, "output_dir", value, "output_dir")
            except ValueError as exc:
                problems.append(str(exc))
            continue
        cls = SECTIONS.get(key)
        if cls is None:
            problems.append(f"unknown section {key!r}")
            continue
        if value is None:
            continue
        if not isinstance(value, dict):
            problems.append(f"{key} must be a mapping")
            continue
        names = {f.name for f in dataclasses.fields(cls)}
        section = getattr(cfg, key)
        for name, v in value.items():
            if name not in names:
                problems.append(f"unknown field {key}.{name}")
                continue
            try:
                setattr(section, name, coerce(cls, name, v, f"{key}.{name}"))
            except ValueError as exc:
                problems.append(str(exc))
    if own and problems:
        raise ConfigError(problems)
    return cfg


def parse(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"not valid YAML: {exc}"]) from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping"])
    return from_dict(raw)


def override_fields() -> list[tuple[str, type, object]]:
    """Every ``section.field`` override with its type and default."""
    out = [("output_dir", str, RunConfig().output_dir)]
    for sec, cls in SECTIONS.items():
        defaults = cls()
        for f in dataclasses.fields(cls):
            typ, _ = _scalar_type(cls, f.name)
            out.append((f"{sec}.{f.name}", typ, getattr(defaults, f.name)))
    return out


def load(path=None, overrides: dict[str, object] | None = None, check_paths: bool = True) -> RunConfig:
    """Read ``path`` (or start from defaults), apply overrides, and validate everything together."""
    problems: list[str] = []
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: not valid YAML: {exc}"]) from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        raw = loaded or {}
    for dotted, value in (overrides or {}).items():
        if dotted == "output_dir":
            raw["output_dir"] = value
            continue
        sec, _, name = dotted.partition(".")
        section = raw.get(sec)
        if not isinstance(section, dict):
            section = {}
            raw[sec] = section
        section[name] = value
    cfg = from_dict(raw, problems)
    problems += cfg.validate(check_paths)
    if problems:
        raise ConfigError(problems)
    return cfg
