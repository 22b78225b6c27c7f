"""Flat ``section.key=value`` run configuration.

One assignment per line, ``#`` starts a comment. Sections map onto the
dataclasses below; values are coerced to the field's default type, tuples
are written comma-separated (``network.channels=48,96,192,384``).
Command-line overrides use the same syntax and are applied after the file.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .network import NetworkConfig
from .training import TrainConfig


class ConfigParseError(ValueError):
    pass


@dataclass
class DataConfig:
    count: int = 2
    dims: tuple = (64, 64, 64)
    noise: float = 0.1
    seed: int = 0


@dataclass
class InferConfig:
    patch: tuple = (32, 32, 32)
    overlap: float = 0.5


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def to_dict(self) -> dict:
        return {s: {f.name: _plain(getattr(getattr(self, s), f.name)) for f in fields(getattr(self, s))}
                for s in SECTIONS}

    def to_text(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            for key, val in values.items():
                lines.append(f"{section}.{key}={_format(val)}")
        return "\n".join(lines) + "\n"


SECTIONS = ("network", "train", "data", "infer")


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _format(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s for s in raw.strip("()[] ").split(",") if s.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(s.strip()) if kind is not tuple else s.strip() for s in items)
    return raw


def parse_assignments(lines, source: str = "<overrides>") -> list[tuple[str, str, str, str]]:
    """(section, key, value, where) per non-blank line; raises with line context."""
    out = []
    for n, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        where = f"{source}:{n}"
        if "=" not in text:
            raise ConfigParseError(f"{where}: expected 'section.key=value', got {line.strip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if key.count(".") != 1:
            raise ConfigParseError(f"{where}: key {key!r} must look like 'section.key'")
        section, name = key.split(".")
        out.append((section, name, value, where))
    return out


def apply(cfg: RunConfig, assignments) -> RunConfig:
    staged = {s: {} for s in SECTIONS}
    for section, name, value, where in assignments:
        if section not in SECTIONS:
            raise ConfigParseError(f"{where}: unknown section {section!r} (have {', '.join(SECTIONS)})")
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        if name not in names:
            raise ConfigParseError(f"{where}: unknown key {section}.{name}")
        try:
            staged[section][name] = _coerce(value, getattr(target, name))
        except ValueError as e:
            raise ConfigParseError(f"{where}: bad value for {section}.{name}: {e}") from None
    try:
        return RunConfig(**{s: replace(getattr(cfg, s), **staged[s]) for s in SECTIONS})
    except ValueError as e:
        raise ConfigParseError(f"invalid configuration: {e}") from None


def load(path: str | Path | None = None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (``section.key=value`` strings)."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg = apply(cfg, parse_assignments(p.read_text().splitlines(), str(p)))
    if overrides:
        cfg = apply(cfg, parse_assignments(overrides, "--set"))
    return cfg
