"""Run configuration: a flat key-value text format with dotted section keys.

Example::

    out_dir = runs/exp1
    data.train_manifest = data/train.tsv
    model.preset = toy
    train.epochs = 30
    loss.gamma = 10

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are
rejected. ``dump_config`` emits a normalized (sorted, canonical-key) echo
whose re-parse is byte-stable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .model_core import FULL_CHANNELS, TOY_CHANNELS, ModelConfig
from .training import TrainConfig

_PRESETS = {"toy": TOY_CHANNELS, "full": FULL_CHANNELS}


@dataclass
class DataConfig:
    train_manifest: str = ""
    paired_manifest: str = ""
    pairs_file: str = ""


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "loss": LossWeights}
# config key -> dataclass field, where the names differ
_ALIASES = {("loss", "lambda"): "lam"}
_FIELD_TO_KEY = {(sec, f): k for (sec, k), f in _ALIASES.items()}


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return low == "true"
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "auto"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))

        if key == "out_dir":
            cfg.out_dir = raw
            continue
        if key == "model.preset":
            if raw not in _PRESETS:
                raise ValueError(f"line {lineno}: unknown preset {raw!r}")
            cfg.model.channels = _PRESETS[raw]
            continue
        if key == "train.lr_milestones":
            cfg.train.lr_milestones = (
                None if raw in ("auto", "") else tuple(int(v) for v in raw.split(","))
            )
            continue

        if "." not in key:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ValueError(f"line {lineno}: unknown section {section!r}")
        target = getattr(cfg, section)
        attr = _ALIASES.get((section, name), name)
        known = {f.name for f in dataclasses.fields(target)}
        aliased_field = (section, attr) in _FIELD_TO_KEY and (section, name) not in _ALIASES
        if attr not in known or aliased_field:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(target, attr, _parse_value(raw, getattr(target, attr)))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from exc

    # re-run dataclass validation with the final field values
    cfg.model = ModelConfig(**dataclasses.asdict(cfg.model))
    cfg.train = TrainConfig(**dataclasses.asdict(cfg.train))
    cfg.loss = LossWeights(**dataclasses.asdict(cfg.loss))
    return cfg


def load_config(path: str | Path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    """Normalized echo: canonical keys, sorted, one per line."""
    entries = {"out_dir": cfg.out_dir}
    for section in _SECTIONS:
        target = getattr(cfg, section)
        for f in dataclasses.fields(target):
            key = _FIELD_TO_KEY.get((section, f.name), f.name)
            entries[f"{section}.{key}"] = _format_value(getattr(target, f.name))
    return "\n".join(f"{k} = {v}" for k, v in sorted(entries.items())) + "\n"


def write_config_echo(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
