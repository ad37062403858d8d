"""Plain-text run configuration: dotted keys, one `key = value` per line.

Values parse as bool/int/float when they look like one, else stay strings.
Files diff cleanly and every run writes its resolved snapshot back in the
same format, so a run is reproducible from the snapshot alone.
"""
from __future__ import annotations

import os


class ConfigError(ValueError):
    """Bad config file, unknown key, or unparsable value."""


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    table: dict[str, object] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key or any(not part for part in key.split(".")):
                raise ConfigError(f"{path}:{lineno}: bad key {key!r}")
            table[key] = parse_value(value)
    return table


def apply_overrides(table: dict, overrides: list[str]) -> dict:
    out = dict(table)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"override {item!r} has an empty key")
        out[key] = parse_value(value)
    return out


def write_snapshot(table: dict, path: str) -> None:
    lines = [f"{key} = {format_value(table[key])}" for key in sorted(table)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def section(table: dict, prefix: str) -> dict:
    """All keys under ``prefix.`` with the prefix stripped."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in table.items() if k.startswith(prefix + ".")}


def expect_known(table: dict, known_prefixes: list[str]) -> None:
    for key in table:
        if not any(key.startswith(p + ".") or key == p for p in known_prefixes):
            raise ConfigError(f"unknown config key: {key}")
