"""INI run configs mapped onto dataclasses; unknown sections or keys are errors."""
from __future__ import annotations

import configparser
import dataclasses
import io
from typing import Any, get_type_hints


class ConfigError(ValueError):
    pass


def _coerce(value: str, typ, where: str):
    try:
        if typ is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot read {value!r} as {getattr(typ, '__name__', typ)}") from None


def section_to_dataclass(section: dict[str, str], cls, name: str, fixed: dict[str, Any] | None = None):
    hints = get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    fixed = fixed or {}
    kwargs = dict(fixed)
    for key, raw in section.items():
        if key not in fields or key in fixed:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        kwargs[key] = _coerce(raw, hints[key], f"[{name}] {key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def read_ini(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return cp


def load_sections(path, schema: dict[str, tuple[type, dict[str, Any]]], allow_prefixed: tuple[str, ...] = ()):
    """Read ``path`` and build one dataclass per known section.

    ``schema`` maps section name to ``(dataclass, fixed_kwargs)``; missing
    sections use defaults. Sections named ``<prefix> <label>`` for a prefix in
    ``allow_prefixed`` are returned raw under ``extra``.
    """
    cp = read_ini(path)
    out: dict[str, Any] = {}
    extra: dict[str, dict[str, str]] = {}
    for name in cp.sections():
        head = name.split(" ", 1)[0]
        if name in schema:
            cls, fixed = schema[name]
            out[name] = section_to_dataclass(dict(cp[name]), cls, name, fixed)
        elif head in allow_prefixed and " " in name:
            extra[name] = dict(cp[name])
        else:
            raise ConfigError(f"unknown section [{name}]")
    for name, (cls, fixed) in schema.items():
        if name not in out:
            out[name] = section_to_dataclass({}, cls, name, fixed)
    return out, extra


def dump_sections(sections: dict[str, Any]) -> str:
    """Render resolved dataclasses back to INI text for run logs."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, obj in sections.items():
        cp[name] = {k: str(v) for k, v in dataclasses.asdict(obj).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
