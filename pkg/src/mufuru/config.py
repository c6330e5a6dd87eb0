"""Run configuration: one JSON document per training job."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cells import ALL_OPS, COMPOSITION_OPS
from .errors import ConfigError
from .tasks import GATE_SETS
from .training import TrainConfig

TASKS = ("logic", "lm", "classify")
CELLS = ("vanilla", "gru", "mufuru")

# task -> defaults that differ between experiments
TASK_DEFAULTS = {
    "logic": {"hidden_size": 8, "epochs": 100, "batch_size": 50, "eval_every": None},
    "lm": {"hidden_size": 200, "epochs": 10, "batch_size": 20, "eval_every": None},
    "classify": {"hidden_size": 100, "epochs": 10, "batch_size": 25, "eval_every": 200},
}

DATA_KEYS = {
    "logic": ("dir", "train", "dev", "test"),
    "lm": ("train", "valid", "test"),
    "classify": ("train", "dev", "test"),
}


@dataclass
class RunConfig:
    task: str = "logic"
    cell: str = "mufuru"
    ops: list[str] | None = None
    hidden_size: int | None = None
    epochs: int | None = None
    batch_size: int | None = None
    learning_rate: float = 1e-3
    seed: int = 0
    data_seed: int = 0
    eval_every: int | None = None
    clip: float | None = None
    truncation: int = 35
    max_steps: int | None = None
    embed_size: int | None = None
    max_vocab: int = 10000
    level: str = "word"
    gates: str = "basic"
    train_size: int = 1000
    test_size: int = 1000
    data: dict[str, str] = field(default_factory=dict)
    out_dir: str | None = None

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate,
                           seed=self.seed if seed is None else seed,
                           eval_every=self.eval_every, clip=self.clip,
                           truncation=self.truncation, max_steps=self.max_steps)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _positive_int(name, value, allow_none=False):
    if value is None and allow_none:
        return
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(name, f"expected a positive integer, got {value!r}")


def _positive_float(name, value, allow_none=False):
    if value is None and allow_none:
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(name, f"expected a positive number, got {value!r}")


def build_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate ``raw`` and fill task-dependent defaults; relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "the configuration must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown field")
    cfg = RunConfig(**raw)

    if cfg.task not in TASKS:
        raise ConfigError("task", f"must be one of {TASKS}, got {cfg.task!r}")
    if cfg.cell not in CELLS:
        raise ConfigError("cell", f"must be one of {CELLS}, got {cfg.cell!r}")
    if cfg.cell == "mufuru":
        if cfg.ops is None:
            cfg.ops = list(ALL_OPS)
        if not isinstance(cfg.ops, list) or not cfg.ops:
            raise ConfigError("ops", "expected a non-empty list of operation names")
        for op in cfg.ops:
            if op not in COMPOSITION_OPS:
                raise ConfigError("ops", f"unknown operation {op!r}")
    elif cfg.ops is not None:
        raise ConfigError("ops", f"only MuFuRU cells take an operation list, cell is {cfg.cell!r}")

    for key, value in TASK_DEFAULTS[cfg.task].items():
        if key not in raw:
            setattr(cfg, key, value)
    if cfg.embed_size is None and cfg.task != "logic":
        cfg.embed_size = cfg.hidden_size

    for name in ("hidden_size", "epochs", "batch_size", "truncation", "max_vocab",
                 "train_size", "test_size"):
        _positive_int(name, getattr(cfg, name))
    for name in ("eval_every", "max_steps", "embed_size"):
        _positive_int(name, getattr(cfg, name), allow_none=True)
    _positive_float("learning_rate", cfg.learning_rate)
    _positive_float("clip", cfg.clip, allow_none=True)
    for name in ("seed", "data_seed"):
        value = getattr(cfg, name)
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ConfigError(name, f"expected a non-negative integer, got {value!r}")
    if cfg.level not in ("word", "char"):
        raise ConfigError("level", f"must be 'word' or 'char', got {cfg.level!r}")
    if cfg.gates not in GATE_SETS:
        raise ConfigError("gates", f"must be one of {tuple(GATE_SETS)}, got {cfg.gates!r}")

    if not isinstance(cfg.data, dict):
        raise ConfigError("data", "expected an object of split paths")
    allowed = DATA_KEYS[cfg.task]
    resolved = {}
    for key, value in cfg.data.items():
        if key not in allowed:
            raise ConfigError(f"data.{key}", f"not a data key for task {cfg.task!r} (use {allowed})")
        path = Path(value)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"data.{key}", f"path does not exist: {path}")
        resolved[key] = str(path)
    cfg.data = resolved
    required = {"lm": ("train", "valid", "test"), "classify": ("train", "dev")}.get(cfg.task, ())
    for key in required:
        if key not in cfg.data:
            raise ConfigError(f"data.{key}", f"required for task {cfg.task!r}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return build_config(raw, base_dir=path.parent)
