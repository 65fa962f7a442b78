"""Flat ``key = value`` run configuration with a fixed schema."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s) -> tuple[int, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(int(x) for x in s)
    return tuple(int(x) for x in str(s).replace(",", " ").split())


def _opt_float(s):
    if s is None or str(s).strip().lower() in ("", "none", "off"):
        return None
    return float(s)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[Any], Any]
    default: Any
    help: str
    section: str  # model | train | run


SCHEMA: dict[str, Key] = {
    k.name: k
    for k in [
        Key("embedding_width", int, 64, "embedding size 2k", "model"),
        Key("kernel_width", int, 3, "convolution width f", "model"),
        Key("dilations", _ints, (1, 2, 4, 8), "dilation stack, e.g. '1,2,4,8,1,2,4,8'", "model"),
        Key("block_variant", str, "A", "residual block A (bottleneck) or B (two full convs)", "model"),
        Key("output_mode", str, "full_softmax", "full_softmax or sampled_softmax", "model"),
        Key("sample_size", int, 0, "negatives per position for sampled_softmax", "model"),
        Key("residual", _bool, True, "keep skip connections", "model"),
        Key("max_length", int, 1024, "longest accepted input sequence", "model"),
        Key("dtype", str, "float64", "float64 or float32", "model"),
        Key("learning_rate", float, 0.001, "optimizer step size", "train"),
        Key("batch_size", int, 32, "sequences per step", "train"),
        Key("max_epochs", int, 10, "epoch budget", "train"),
        Key("eval_every_steps", int, 0, "validation cadence in steps (0 = per epoch)", "train"),
        Key("objective", str, "full_sequence", "full_sequence or last_item", "train"),
        Key("augment", _bool, False, "add padded sub-sessions of each training window", "train"),
        Key("min_context", int, 5, "shortest real context kept by augmentation", "train"),
        Key("optimizer", str, "adam", "adam or sgd", "train"),
        Key("clip_norm", _opt_float, None, "global gradient-norm clip (none = off)", "train"),
        Key("patience", int, 3, "early stop after this many evals without MRR@5 gain (0 = off)", "train"),
        Key("eval_subsample", int, 1024, "validation windows used per evaluation", "train"),
        Key("target_val_loss", _opt_float, None, "stop once validation loss reaches this value", "train"),
        Key("seed", int, 0, "seed for initialization, shuffling and sampling", "run"),
        Key("data_dir", str, "", "directory with train.txt / valid.txt / vocab.tsv", "run"),
        Key("out_dir", str, "", "run directory (default runs/<timestamp>-seed<seed>)", "run"),
    ]
}


def parse_config_file(path) -> dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return validate(out, source=str(path))


def validate(values: dict[str, Any], source: str = "config") -> dict[str, Any]:
    out = {}
    for key, value in values.items():
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            out[key] = SCHEMA[key].parse(value) if value is not None else None
        except ValueError as e:
            raise ConfigError(f"{source}: bad value for {key!r}: {e}") from None
    return out


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def merge(cls, file_path=None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        """Defaults, then the config file, then command-line overrides."""
        values = {k: v.default for k, v in SCHEMA.items()}
        if file_path:
            values.update(parse_config_file(file_path))
        if overrides:
            values.update(validate({k: v for k, v in overrides.items() if v is not None}, "command line"))
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self, vocab_size: int) -> ModelConfig:
        kw = {k: v for k, v in self.values.items() if SCHEMA[k].section == "model"}
        return ModelConfig(vocab_size=vocab_size, seed=self.values["seed"], **kw)

    def train_config(self) -> TrainConfig:
        kw = {k: v for k, v in self.values.items() if SCHEMA[k].section == "train"}
        return TrainConfig(seed=self.values["seed"], **kw)

    def render(self) -> str:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(map(str, v))
            return "none" if v is None else str(v)

        return "".join(f"{k} = {fmt(v)}\n" for k, v in self.values.items())
