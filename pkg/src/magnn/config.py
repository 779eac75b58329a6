"""Run configuration: ``key = value`` files with dotted sections.

Example::

    # comments start with '#'
    seed = 7
    dataset.delimiter = ,
    model.variant = FULL
    train.batch_size = 4096
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSettings:
    user_col: str = "userId"
    item_col: str = "movieId"
    rating_col: str = "rating"
    time_col: str = "timestamp"
    delimiter: str = ","
    rating_threshold: float = 4.0
    min_count: int = 10
    # implicit data without ratings: skip the threshold (and the rating column)
    binary: bool = False
    max_malformed: int = 0
    reference: str = ""


@dataclass
class GraphSettings:
    lookahead: int = 3
    symmetric: bool = False


@dataclass
class EvalSettings:
    k: int = 10
    split: str = "test"


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    graph: GraphSettings = field(default_factory=GraphSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.strip().rpartition(".")
        target = getattr(self, section, None) if section else self
        if target is None or not dataclasses.is_dataclass(target):
            raise ConfigError(f"unknown config section in {key!r}")
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields or dataclasses.is_dataclass(getattr(target, name)):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(raw, type(getattr(target, name)), key))

    def apply_seed(self) -> None:
        """The run seed drives both initialisation and sampling."""
        self.model.seed = self.seed
        self.train.seed = self.seed

    def items(self) -> list[tuple[str, Any]]:
        out = [("seed", self.seed)]
        for sec in ("dataset", "graph", "model", "train", "eval"):
            for f in dataclasses.fields(getattr(self, sec)):
                out.append((f"{sec}.{f.name}", getattr(getattr(self, sec), f.name)))
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.items())

    def validate(self) -> "RunConfig":
        try:
            self.model.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval.split not in ("val", "test"):
            raise ConfigError("eval.split must be val or test")
        if self.graph.lookahead < 1:
            raise ConfigError("graph.lookahead must be >= 1")
        return self


def _coerce(raw: str, kind: type, key: str):
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    if text == r"\t":
        return "\t"
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value == "\t":
        return r"\t"
    return str(value)


def parse_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides: list[tuple[str, str]] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for key, value in parse_lines(text):
            cfg.set(key, value)
    for key, value in overrides or []:
        cfg.set(key, value)
    cfg.apply_seed()
    return cfg.validate()
