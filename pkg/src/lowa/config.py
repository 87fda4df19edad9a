"""Sectioned ``key = value`` run configuration.

Four sections are recognised: ``model`` (ModelConfig fields), ``train``
(TrainConfig fields), ``data`` and ``eval``.  Every key is checked against the
schema before any work starts; unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace

from .model import ModelConfig
from .trainer import TrainConfig

SEED_ENV = "LOWA_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_images: int = 2000
    heldout_images: int = 200
    min_objects: int = 1
    max_objects: int = 3
    novel_fraction: float = 0.3
    write_images: bool = True
    templates: str = ""
    antonyms: str = ""
    split_override: str = ""

    def __post_init__(self):
        if self.train_images < 1 or self.heldout_images < 1:
            raise ValueError("image counts must be >= 1")
        if not 0.0 <= self.novel_fraction <= 1.0:
            raise ValueError("novel_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 8
    ar_k: int = 10
    threshold: float = 0.5
    top_k: int = 10
    head_pct: float = 2 / 3
    tail_pct: float = 1 / 3

    def __post_init__(self):
        if self.k < 1 or self.ar_k < 1 or self.top_k < 1:
            raise ValueError("k, ar_k and top_k must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 < self.tail_pct < self.head_pct < 1.0:
            raise ValueError("need 0 < tail_pct < head_pct < 1")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.train.seed


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}


def schema() -> dict[str, dict[str, type]]:
    """Section -> key -> Python type."""
    return {name: {f.name: type(getattr(cls(), f.name)) for f in fields(cls)} for name, cls in SECTIONS.items()}


def _coerce(raw: str, kind: type, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {kind.__name__}, got {raw!r}") from None
    return raw


def parse_values(values: dict[str, dict[str, str]], origin: str = "config") -> dict[str, dict]:
    """Validate raw strings against the schema and convert them."""
    sch = schema()
    out: dict[str, dict] = {}
    for section, items in values.items():
        if section not in sch:
            raise ConfigError(f"{origin}: unknown section [{section}] (known: {', '.join(sch)})")
        for key, raw in items.items():
            if key not in sch[section]:
                raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
            out.setdefault(section, {})[key] = _coerce(raw, sch[section][key], f"{origin} [{section}] {key}")
    return out


def read_config_file(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, empty_lines_in_values=False)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc.message if hasattr(exc, 'message') else exc}") from None
    if parser.defaults():
        raise ConfigError(f"{path}: keys outside a section are not allowed")
    return {s: dict(parser.items(s)) for s in parser.sections()}


def parse_override(text: str) -> tuple[str, str, str]:
    """``section.key=value`` -> (section, key, value)."""
    name, sep, value = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    return section, key, value


def resolve_seed(flag: int | None, configured: int | None) -> int:
    """Flag beats config file beats ``LOWA_SEED`` beats 0."""
    if flag is not None:
        return flag
    if configured is not None:
        return configured
    env = os.environ.get(SEED_ENV)
    if env is None or not env.strip():
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def load_run_config(path=None, overrides: dict[str, dict[str, str]] | None = None,
                    seed: int | None = None) -> RunConfig:
    """Merge file values, then overrides, into a validated RunConfig."""
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        for section, items in read_config_file(path).items():
            raw.setdefault(section, {}).update(items)
    parsed = parse_values(raw, str(path) if path is not None else "config")
    for section, items in parse_values(overrides or {}, "override").items():
        parsed.setdefault(section, {}).update(items)
    parsed.setdefault("train", {})["seed"] = resolve_seed(seed, parsed.get("train", {}).get("seed"))
    built = {}
    for name, cls in SECTIONS.items():
        try:
            built[name] = cls(**parsed.get(name, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    return RunConfig(**built)


def dump_run_config(cfg: RunConfig) -> str:
    """Render ``cfg`` back to the file format (round-trips through load_run_config)."""
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, bool):
                text = str(value).lower()
            elif isinstance(value, str):
                text = value
            else:
                text = repr(value)
            lines.append(f"{f.name} = {text}")
        lines.append("")
    return "\n".join(lines)


def with_steps(cfg: RunConfig, steps_o=None, steps_a=None, steps_f=None) -> RunConfig:
    changes = {k: v for k, v in (("steps_o", steps_o), ("steps_a", steps_a), ("steps_f", steps_f)) if v is not None}
    if not changes:
        return cfg
    try:
        return replace(cfg, train=replace(cfg.train, **changes))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
