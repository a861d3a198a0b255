"""Flat ``key = value`` pipeline configuration files.

Keys are dotted: ``phantom.*``, ``train.*``, ``model.*`` (generator),
``disc.*`` (discriminator), ``motion.*`` (simulation and registration) and
``kinetics.*``, plus the top-level ``seed``. ``#`` starts a comment. Every key
is optional; unknown keys and malformed values are rejected with the line
number. ``motion.spacing`` sets the control spacing for both simulation and
registration so predicted and true fields share a grid.

Example::

    seed = 3
    phantom.noise_level = 50
    train.epochs = 30
    motion.magnitude = 6
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .experiments import MotionConfig, PipelineConfig

SECTIONS = {
    "phantom": ("phantom",),
    "train": ("train",),
    "model": ("model",),
    "disc": ("disc",),
    "motion": ("motion", "registration"),
    "kinetics": ("kinetics",),
}


class ConfigError(ValueError):
    pass


def _coerce(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected true/false, got {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, str):
            return text
        if isinstance(default, tuple):
            if default and isinstance(default[0], tuple):
                # frame schedule: "14x5, 6x10, ..."
                out = []
                for part in text.split(","):
                    n, _, d = part.strip().partition("x")
                    out.append((int(n), float(d)))
                return tuple(out)
            items = [p.strip() for p in text.split(",")]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in items)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None
    raise ConfigError(f"{where}: unsupported value type {type(default).__name__}")


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    base = PipelineConfig()
    updates: dict[str, dict] = {name: {} for name in ("phantom", "train", "model", "disc", "motion", "registration", "kinetics")}
    seed = base.seed
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}, line {lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        if key == "seed":
            seed = _coerce(value, 0, where)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{where}: unknown key {key!r}")
        targets = [t for t in SECTIONS[section] if name in {f.name for f in dataclasses.fields(getattr(base, t))}]
        if not targets:
            raise ConfigError(f"{where}: unknown key {key!r}")
        for t in targets:
            updates[t][name] = _coerce(value, getattr(getattr(base, t), name), where)
    try:
        parts = {t: dataclasses.replace(getattr(base, t), **kw) for t, kw in updates.items()}
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{source}: {e}") from None
    return PipelineConfig(seed=seed, **parts)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: no such config file") from None
    return parse_config(text, str(path))


def dump_config(cfg: PipelineConfig) -> str:
    """Render every key; ``parse_config(dump_config(c)) == c``."""
    lines = [f"seed = {cfg.seed}"]
    for section, targets in SECTIONS.items():
        done = set()
        for t in targets:
            obj = getattr(cfg, t)
            for f in dataclasses.fields(obj):
                if f.name in done:
                    continue
                done.add(f.name)
                v = getattr(obj, f.name)
                if isinstance(v, tuple) and v and isinstance(v[0], tuple):
                    text = ", ".join(f"{n}x{d!r}" for n, d in v)
                elif isinstance(v, tuple):
                    text = ", ".join(repr(x) for x in v)
                elif isinstance(v, bool):
                    text = "true" if v else "false"
                else:
                    text = repr(v) if isinstance(v, float) else str(v)
                lines.append(f"{section}.{f.name} = {text}")
    return "\n".join(lines) + "\n"


__all__ = ["ConfigError", "MotionConfig", "PipelineConfig", "dump_config", "load_config", "parse_config"]
