"""Flat ``section.key = value`` run configuration.

Sections: ``model.``, ``train.``, ``loss.``, ``data.``, ``run.``.  Unknown
keys are rejected.  The resolved config is written back in the same format
so a run directory can be replayed from it alone.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from recalnet.model import ModelConfig
from recalnet.synthdata import PhantomSpec
from recalnet.tensor import ConfigError
from recalnet.train import LossConfig, TrainConfig

SEED_ENV = "RECAL_SEED"


@dataclass
class DataConfig:
    cls: str = "pupil"
    image_size: tuple[int, int] = (64, 64)
    train_count: int = 64
    val_count: int = 16
    root: str = ""            # empty: generate in memory
    seed: int = 0

    def phantom(self) -> PhantomSpec:
        return PhantomSpec(image_size=self.image_size, cls=self.cls, seed=self.seed)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(width_scale=8, input_size=(64, 64)))
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def sections(self) -> dict:
        return {"model": self.model, "train": self.train, "loss": self.loss, "data": self.data}

    def apply_seed(self) -> None:
        """Propagate the run seed into every section that draws random numbers."""
        self.model.seed = self.seed
        self.train.seed = self.seed
        self.data.seed = self.seed


def _coerce(current, raw: str, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [s for s in raw.replace(",", " ").split() if s]
            if current and isinstance(current[0], bool):
                return tuple(_coerce(True, s, key) for s in items)
            if current and isinstance(current[0], int):
                return tuple(int(s) for s in items)
            if current and isinstance(current[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from exc
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(lines) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def apply(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Return a copy of ``cfg`` with ``section.key`` overrides applied."""
    updates: dict[str, dict] = {}
    seed = cfg.seed
    for key, raw in pairs.items():
        if key in ("seed", "run.seed"):
            seed = _coerce(0, raw, key)
            continue
        section, _, name = key.partition(".")
        target = cfg.sections().get(section)
        if target is None or name not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        updates.setdefault(section, {})[name] = _coerce(getattr(target, name), raw, key)
    built = {s: dataclasses.replace(obj, **updates.get(s, {})) for s, obj in cfg.sections().items()}
    return RunConfig(seed=seed, **built)


def load(path=None, overrides: dict[str, str] | None = None, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        cfg = apply(cfg, {"seed": env_seed})
    if path is not None:
        cfg = apply(cfg, parse_lines(Path(path).read_text().splitlines()))
    if overrides:
        cfg = apply(cfg, overrides)
    cfg.apply_seed()
    return cfg


def dump(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for section, obj in cfg.sections().items():
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def write(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump(cfg))
