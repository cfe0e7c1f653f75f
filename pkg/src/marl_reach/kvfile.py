"""Human-readable ``key = value`` files used for configs and run manifests."""
from __future__ import annotations

import dataclasses
from pathlib import Path

from marl_reach.errors import ConfigurationError


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def parse_value(text: str):
    text = text.strip()
    if text in ("true", "false"):
        return text == "true"
    if "," in text:
        return tuple(parse_value(x) for x in text.split(","))
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def dumps(items: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in items.items())


def loads(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def write(path, items: dict) -> None:
    Path(path).write_text(dumps(items))


def read(path) -> dict:
    return loads(Path(path).read_text())


def dataclass_from_items(cls, items: dict):
    """Build dataclass ``cls`` from parsed items, coercing to the defaults' types."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(items) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in items.items():
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[name] = _coerce(name, value, default)
    return cls(**kwargs)


def _coerce(name, value, default):
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, tuple):
            value = value if isinstance(value, tuple) else (value,)
            return tuple(type(d)(v) for d, v in zip(default, value, strict=True))
        if isinstance(default, (int, float)):
            return type(default)(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad value for {name}: {value!r}") from exc
    return value

