"""Run configuration: dataclasses plus a ``key = value`` file loader."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


CONTEXT_MODES = ("leave-one-out", "preceding")
TOKENIZERS = ("simple", "whitespace")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 5
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    max_sentence_len: int = 30
    tau0: float = 1.0
    embed_dim: int = 300
    lm_hidden: tuple = (600,)
    topics: tuple = (100,)
    dropout: float = 0.4
    recurrent: bool = True
    flipped: bool = False
    seed: int = 0
    eta0: float = 0.01
    eta_pi: float = 0.01
    eps0: float = 0.1
    kappa: float = 0.7
    fim_decay: float = 0.9
    train_context: str = "leave-one-out"
    include_eos: bool = True
    log1p_input: bool = False
    k_min: float = 0.1
    min_count: int = 10
    trim_fraction: float = 0.001
    tokenizer: str = "simple"

    def __post_init__(self):
        self.lm_hidden = tuple(int(h) for h in _as_seq(self.lm_hidden))
        self.topics = tuple(int(k) for k in _as_seq(self.topics))
        self.validate()

    @property
    def enc_hidden(self) -> tuple:
        # one sentence-RNN unit per topic at every layer
        return self.topics

    def validate(self) -> None:
        positive = ("batch_size", "clip_norm", "max_sentence_len", "tau0",
                    "embed_dim", "eta0", "eta_pi", "k_min", "min_count")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("epochs", "learning_rate", "eps0", "kappa", "trim_fraction"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0 <= self.fim_decay < 1:
            raise ConfigError("fim_decay must lie in [0, 1)")
        if not self.lm_hidden or any(h <= 0 for h in self.lm_hidden):
            raise ConfigError("lm_hidden needs at least one positive size")
        if len(self.topics) != len(self.lm_hidden) or any(k <= 0 for k in self.topics):
            raise ConfigError(f"topics {self.topics} must give one positive size per LM layer {self.lm_hidden}")
        if self.tokenizer not in TOKENIZERS:
            raise ConfigError(f"tokenizer must be one of {TOKENIZERS}")
        if self.train_context not in CONTEXT_MODES:
            raise ConfigError(f"train_context must be one of {CONTEXT_MODES}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lm_hidden"] = list(self.lm_hidden)
        d["topics"] = list(self.topics)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(cls, k, v) for k, v in d.items()})


def _as_seq(v):
    if isinstance(v, str):
        return [p for p in v.replace(",", "-").split("-") if p.strip()]
    if isinstance(v, int):
        return [v]
    return list(v)


def _coerce(cls, name, value):
    if not isinstance(value, str):
        return value
    default = {f.name: f.default for f in dataclasses.fields(cls)}[name]
    if isinstance(default, bool):
        low = value.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return low in ("true", "1", "yes", "on")
    if isinstance(default, int):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    return value.strip()


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    explicit: frozenset = frozenset()   # TrainConfig keys set by the file or flags


PATH_KEYS = ("corpus", "vocab", "checkpoint", "output_dir", "stopwords", "word_vectors",
             "eval_corpus", "references")


def load_config_file(path) -> dict:
    """Read a sectioned ``key = value`` file into a flat dict.

    Keys under ``[train]`` (or ``[model]``) feed :class:`TrainConfig`; keys
    under ``[paths]`` are file locations; anything else is rejected.
    """
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from None
    flat = {}
    for section in parser.sections():
        if section not in ("train", "model", "paths"):
            raise ConfigError(f"{p}: unknown section [{section}]")
        for k, v in parser.items(section):
            if section == "paths" and k not in PATH_KEYS:
                raise ConfigError(f"{p}: unknown path key {k!r}")
            flat[k] = v
    return flat


def build_run_config(file_values: dict, overrides: dict) -> RunConfig:
    """Merge file values with flag overrides (flags win)."""
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    paths = {k: merged.pop(k) for k in list(merged) if k in PATH_KEYS}
    return RunConfig(TrainConfig.from_dict(merged), paths, explicit=frozenset(merged))
