"""One JSON document pinning a whole run: five config sections plus paths.

Flags override file values through dotted paths such as
``--train.learning_rate 1e-3`` or ``--assembly.use_nld false``.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .assembly import AssemblyConfig
from .encoder import EncoderConfig
from .synth import SynthConfig
from .tracker import DecodingConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    schemas: str | None = None
    dialogues: str | None = None
    dev_schemas: str | None = None
    dev_dialogues: str | None = None
    model_dir: str | None = None
    output_dir: str | None = None


SECTIONS = {
    "assembly": AssemblyConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "decoding": DecodingConfig,
    "synth": SynthConfig,
    "paths": Paths,
}


def _desk_assembly() -> AssemblyConfig:
    # the desk encoder has 384 positions, so the full sequence is capped there
    return AssemblyConfig(max_seq_len=384)


@dataclass(frozen=True)
class RunConfig:
    assembly: AssemblyConfig = field(default_factory=_desk_assembly)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: Paths = field(default_factory=Paths)
    vocab_size: int = 5000

    def __post_init__(self):
        if self.encoder.max_seq_len < self.assembly.max_seq_len:
            raise ConfigError(
                f"encoder.max_seq_len ({self.encoder.max_seq_len}) must be >= "
                f"assembly.max_seq_len ({self.assembly.max_seq_len})"
            )
        if self.vocab_size < 7:
            raise ConfigError("vocab_size must leave room for the reserved tokens")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _coerce(raw, tp, where: str):
    """Parse a flag string (or JSON value) into the field type ``tp``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if raw is None or (isinstance(raw, str) and raw.lower() in ("none", "null")):
            if type(None) in args:
                return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(raw, a, where)
            except ConfigError:
                continue
        raise ConfigError(f"{where}: cannot interpret {raw!r}")
    if tp is bool:
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "1", "yes", "on"):
            return True
        if isinstance(raw, str) and raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected true/false, got {raw!r}")
    if tp in (int, float, str):
        try:
            if tp is int and isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return tp(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected {tp.__name__}, got {raw!r}") from None
    if origin in (dict, tuple, list) or tp is dict:
        if isinstance(raw, str):
            try:
                raw = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{where}: expected JSON, got {raw!r}") from exc
        return tuple(raw) if origin is tuple else raw
    return raw


def _section(cls, values: dict, name: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key {name}.{sorted(unknown)[0]} (known: {', '.join(sorted(known))})")
    kwargs = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in values.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def from_dict(obj: dict, overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a RunConfig from a (partial) dict plus dotted-path overrides."""
    obj = {k: dict(v) if isinstance(v, dict) else v for k, v in obj.items()}
    for dotted, value in (overrides or {}).items():
        head, _, tail = dotted.partition(".")
        if head in SECTIONS and tail:
            obj.setdefault(head, {})[tail] = value
        elif head == "vocab_size" and not tail:
            obj["vocab_size"] = value
        else:
            raise ConfigError(f"unknown option --{dotted}")
    unknown = set(obj) - set(SECTIONS) - {"vocab_size"}
    if unknown:
        raise ConfigError(f"unknown config section {sorted(unknown)[0]!r}")
    kwargs = {}
    defaults = RunConfig()
    for name, cls in SECTIONS.items():
        base = asdict(getattr(defaults, name))
        base.update(obj.get(name, {}))
        kwargs[name] = _section(cls, base, name)
    if "vocab_size" in obj:
        kwargs["vocab_size"] = _coerce(obj["vocab_size"], int, "vocab_size")
    return RunConfig(**kwargs)


def load_config(path: str | os.PathLike | None, overrides: dict[str, str] | None = None) -> RunConfig:
    obj = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return from_dict(obj, overrides)


def with_paths(cfg: RunConfig, **paths) -> RunConfig:
    """Copy with the given path fields replaced (None values are ignored)."""
    given = {k: str(v) for k, v in paths.items() if v is not None}
    return replace(cfg, paths=replace(cfg.paths, **given)) if given else cfg
