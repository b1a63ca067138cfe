"""One JSON document configuring every stage, with ``--set`` style overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .baseline import MorphConfig
from .net import NetConfig
from .pipeline import TrainConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    cell_size: float = 1.0

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")


SECTIONS = {
    "synth": SynthConfig,
    "net": NetConfig,
    "train": TrainConfig,
    "morph": MorphConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    morph: MorphConfig = field(default_factory=MorphConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


def _check_value(path: str, value, default):
    """Type-check ``value`` against the kind of the field's default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
        if ok and isinstance(default, tuple) and len(value) != len(default):
            raise ConfigError(f"{path}: expected {len(default)} numbers, got {len(value)}")
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {json.dumps(value)}")


def build_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>: expected a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"<root>: unknown section(s) {sorted(unknown)}")
    built = {}
    for name, cls in SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{name}: expected an object")
        defaults = asdict(cls())
        bad = set(section) - set(defaults)
        if bad:
            raise ConfigError(f"{name}: unknown key(s) {sorted(bad)}")
        for key, value in section.items():
            _check_value(f"{name}.{key}", value, getattr(cls(), key))
        try:
            built[name] = cls(**{**defaults, **section})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
    return RunConfig(**built)


def apply_override(doc: dict, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"--set key must look like section.field, got {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    doc.setdefault(parts[0], {})
    if not isinstance(doc[parts[0]], dict):
        raise ConfigError(f"{parts[0]}: expected an object")
    doc[parts[0]][parts[1]] = value


def load_config(path=None, overrides=(), seed: int | None = None, workers: int | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    for item in overrides:
        apply_override(doc, item)
    if seed is not None:
        for name in ("synth", "train"):
            doc.setdefault(name, {})["seed"] = seed
    if workers is not None:
        doc.setdefault("train", {})["workers"] = workers
    return build_config(doc)

