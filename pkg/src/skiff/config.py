"""Plain-text `section.key=value` config files for models, training, and data."""

from __future__ import annotations

from dataclasses import fields

from .model import ModelConfig
from .synth import SynthConfig
from .train import TrainConfig


class ConfigError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _int_tuple(text: str) -> tuple:
    return tuple(int(p) for p in text.split(",")) if text else ()


def _float_tuple(text: str) -> tuple:
    return tuple(float(p) for p in text.split(",")) if text else ()


_PARSERS = {bool: _parse_bool, int: int, float: float, str: str}


def _field_parsers(cls, tuple_of=int):
    out = {}
    for f in fields(cls):
        kind = type(f.default)  # every config field carries a literal default
        if kind is tuple:
            out[f.name] = _int_tuple if tuple_of is int else _float_tuple
        else:
            out[f.name] = _PARSERS[kind]
    return out


_MODEL_PARSERS = _field_parsers(ModelConfig)
_SYNTH_PARSERS = _field_parsers(SynthConfig)
_TRAIN_PARSERS = _field_parsers(TrainConfig, tuple_of=float)

_SECTIONS = {"model": _MODEL_PARSERS, "train": _TRAIN_PARSERS, "synth": _SYNTH_PARSERS}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_configs(model: ModelConfig | None = None, train: TrainConfig | None = None,
                      synth: SynthConfig | None = None) -> str:
    lines = []
    for section, cfg in (("model", model), ("train", train), ("synth", synth)):
        if cfg is None:
            continue
        for f in fields(cfg):
            lines.append(f"{section}.{f.name}={_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict:
    """Returns {'model': {...}, 'train': {...}, 'synth': {...}} with typed values."""
    out: dict = {"model": {}, "train": {}, "synth": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} needs a section prefix "
                              f"(model., train., or synth.)")
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        parsers = _SECTIONS[section]
        if name not in parsers:
            raise ConfigError(f"line {lineno}: unknown key {name!r} in section {section!r}")
        try:
            out[section][name] = parsers[name](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return out


def model_config_from_text(text: str, **overrides) -> ModelConfig:
    parsed = parse_config_text(text)["model"]
    parsed.update(overrides)
    return ModelConfig(**parsed)


def train_config_from_text(text: str, **overrides) -> TrainConfig:
    parsed = parse_config_text(text)["train"]
    parsed.update(overrides)
    return TrainConfig(**parsed)


def synth_config_from_text(text: str, **overrides) -> SynthConfig:
    parsed = parse_config_text(text)["synth"]
    parsed.update(overrides)
    return SynthConfig(**parsed)


def load_config_file(path: str) -> dict:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())
