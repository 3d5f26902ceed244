"""Run configuration: one schema drives the key=value file format and the CLI flags."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .generator import KeySchedule
from .trainer import REMOVED_OPTIONS, ConfigError, TrainConfig


@dataclass
class RunOptions:
    data: str | None = field(default=None, metadata={"help": "corpus root holding peer/ and target/"})
    encoder: str = field(default="stub", metadata={"help": "class-embedding encoder: stub | weights:<path>"})
    direction_encoder: str = field(
        default="stub", metadata={"help": "direction encoders: stub | weights:<image.pt>,<prompts.json>"})
    t_peer: str | None = field(default=None, metadata={"help": "peer prompt (default: labels.txt line 1)"})
    t_target: str | None = field(default=None, metadata={"help": "target prompt (default: labels.txt line 2)"})


@dataclass(frozen=True)
class SchemaEntry:
    name: str
    type: object
    default: object
    help: str
    section: str

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def _entries(cls, section: str) -> list[SchemaEntry]:
    hints = typing.get_type_hints(cls)
    return [SchemaEntry(f.name, hints[f.name], f.default, f.metadata.get("help", ""), section)
            for f in dataclasses.fields(cls)]


SCHEMA: tuple[SchemaEntry, ...] = tuple(_entries(RunOptions, "run") + _entries(TrainConfig, "train"))
SCHEMA_BY_NAME = {e.name: e for e in SCHEMA}


def parse_key_string(text: str, resolution: int | None = None) -> KeySchedule:
    """``"4+8+16"`` -> KeySchedule; checked against the model's resolutions when given."""
    available = None
    if resolution is not None:
        available = {2 ** i for i in range(2, resolution.bit_length())}
    try:
        return KeySchedule.parse(text, available)
    except ValueError as exc:
        raise ConfigError(f"bad value for 'key': {exc}") from exc


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(entry: SchemaEntry, text: str):
    """Convert text for one schema entry; ``none`` means unset for optional entries."""
    tp = entry.type
    args = typing.get_args(tp)
    if type(None) in args:
        if text.strip().lower() in ("", "none"):
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            return _parse_bool(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {entry.name!r}: {exc}") from exc


def normalize_key(name: str) -> str:
    return name.strip().lstrip("-").replace("-", "_")


def check_key(name: str) -> SchemaEntry:
    if name in REMOVED_OPTIONS or "path_length" in name or "mixing" in name:
        raise ConfigError(f"option {name!r} is not supported: path-length regularization and "
                          f"style mixing are removed from this model")
    if name not in SCHEMA_BY_NAME:
        raise ConfigError(f"unknown config key {name!r}")
    return SCHEMA_BY_NAME[name]


def read_config_file(path: str | Path) -> dict[str, object]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        name = normalize_key(key)
        values[name] = parse_value(check_key(name), value)
    return values


@dataclass
class RunConfig:
    run: RunOptions = field(default_factory=RunOptions)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_values(cls, values: dict[str, object]) -> "RunConfig":
        run_values, train_values = {}, {}
        for name, value in values.items():
            entry = check_key(name)
            (run_values if entry.section == "run" else train_values)[name] = value
        return cls(RunOptions(**run_values), TrainConfig.from_dict(train_values))

    def get(self, name: str):
        entry = SCHEMA_BY_NAME[name]
        return getattr(self.run if entry.section == "run" else self.train, name)

    def echo(self) -> str:
        lines = ["# frozen run configuration; usable as --config"]
        for entry in SCHEMA:
            value = self.get(entry.name)
            lines.append(f"{entry.name.replace('_', '-')} = {'none' if value is None else value}")
        return "\n".join(lines) + "\n"

    @property
    def key_schedule(self) -> KeySchedule:
        return parse_key_string(self.train.key, self.train.resolution)


def merge(file_values: dict[str, object] | None, flag_values: dict[str, object]) -> RunConfig:
    """Defaults, then config-file values, then command-line flags."""
    values = dict(file_values or {})
    values.update(flag_values)
    return RunConfig.from_values(values)
