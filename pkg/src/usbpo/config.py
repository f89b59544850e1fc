"""INI run configuration: one section per RunConfig group, unknown keys rejected.

Example::

    [run]
    task = pendulum
    epochs = 30

    [model]
    hidden = 64, 64
    variant = full

Top-level RunConfig fields go under ``[run]``; ``[model]``, ``[rollout]``,
``[policy]`` and ``[buffers]`` map onto their dataclasses. Omitted keys take
the dataclass defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from pathlib import Path

from .exceptions import UsageError
from .orchestrator import BufferConfig, ModelConfig, PolicyConfig, RolloutConfig, RunConfig

SECTIONS = {"model": ModelConfig, "rollout": RolloutConfig, "policy": PolicyConfig, "buffers": BufferConfig}


class ConfigError(UsageError):
    """Bad configuration; the message names the file position and field."""


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return n
        elif key is not None and current == section and "=" in line:
            if line.split("=", 1)[0].strip().lower() == key:
                return n
    return None


def _where(source: str, text: str, section: str, key: str | None = None) -> str:
    n = _line_of(text, section, key)
    loc = f"{source}:{n}" if n is not None else source
    return f"{loc}: [{section}]" + (f" {key}" if key else "")


def _scalar_type(tp):
    """Strip ``X | None`` to X; return (type, optional)."""
    if isinstance(tp, types.UnionType) or typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _parse_value(raw: str, tp):
    tp, optional = _scalar_type(tp)
    raw = raw.strip()
    if optional and raw.lower() in ("", "none", "auto"):
        return None
    if typing.get_origin(tp) is tuple:
        parts = [p for p in raw.replace(",", " ").split()]
        if not parts:
            raise ValueError("expected a comma-separated list of integers")
        return tuple(int(p) for p in parts)
    if tp is bool:
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError("expected a boolean")
    if tp is int:
        return int(raw.replace("_", ""))
    if tp is float:
        return float(raw)
    return raw


def _section_kwargs(parser, text, source, section, cls) -> dict:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in parser.items(section):
        if key not in names or key in SECTIONS:
            raise ConfigError(f"{_where(source, text, section, key)}: unknown key "
                              f"(allowed: {', '.join(sorted(names - set(SECTIONS)))})")
        try:
            kwargs[key] = _parse_value(raw, hints[key])
        except ValueError as exc:
            raise ConfigError(f"{_where(source, text, section, key)}: cannot parse {raw!r} ({exc})") from None
    return kwargs


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    for section in parser.sections():
        if section != "run" and section not in SECTIONS:
            raise ConfigError(f"{_where(source, text, section)}: unknown section "
                              f"(allowed: run, {', '.join(SECTIONS)})")
    top = _section_kwargs(parser, text, source, "run", RunConfig) if parser.has_section("run") else {}
    for section, cls in SECTIONS.items():
        if parser.has_section(section):
            try:
                top[section] = cls(**_section_kwargs(parser, text, source, section, cls))
            except TypeError as exc:
                raise ConfigError(f"{_where(source, text, section)}: {exc}") from None
    try:
        return RunConfig(**top)
    except UsageError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: RunConfig) -> str:
    """Inverse of :func:`parse_config`; every field is written explicitly."""
    lines = ["[run]"]
    for f in dataclasses.fields(RunConfig):
        if f.name not in SECTIONS:
            lines.append(f"{f.name} = {_format(getattr(config, f.name))}")
    for section in SECTIONS:
        lines += ["", f"[{section}]"]
        sub = getattr(config, section)
        lines += [f"{f.name} = {_format(getattr(sub, f.name))}" for f in dataclasses.fields(sub)]
    return "\n".join(lines) + "\n"
