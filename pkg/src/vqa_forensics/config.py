"""Experiment configuration: nested dataclasses, JSON file, env and flag overrides.

Precedence, lowest first: dataclass defaults, the JSON config file,
``VQAF_*`` environment variables, command-line overrides. Keys are dotted
paths (``tune.lr``); in the environment the dots become double underscores,
so ``VQAF_TUNE__LR=0.01`` sets ``tune.lr``.

Every stage seed is derived from the single root ``seed``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baseline import BaselineConfig
from .corpus import CorpusConfig
from .model import ModelConfig
from .pretrain import PretrainConfig
from .prompt_tuning import TuneConfig

ENV_PREFIX = "VQAF_"
SUBSET_CHOICES = ("seen", "unseen", "all")
VSTAR_CHOICES = ("tuned", "random")


class ConfigError(ValueError):
    """Schema violation in a config file, env var or flag override."""


@dataclass
class EvalConfig:
    subsets: str = "seen"
    with_pseudo: bool = True
    vstar: str = "tuned"
    max_len: int = 24

    def __post_init__(self):
        if self.subsets not in SUBSET_CHOICES:
            raise ConfigError(f"eval.subsets must be one of {SUBSET_CHOICES}, got {self.subsets!r}")
        if self.vstar not in VSTAR_CHOICES:
            raise ConfigError(f"eval.vstar must be one of {VSTAR_CHOICES}, got {self.vstar!r}")
        if self.max_len < 0:
            raise ConfigError("eval.max_len must be >= 0")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.derive_seeds()

    def derive_seeds(self) -> None:
        """Overwrite every stage seed with one derived from the root seed."""
        self.corpus.seed = self.seed
        self.pretrain.seed = stage_seed(self.seed, "pretrain")
        self.tune.seed = stage_seed(self.seed, "tune")
        self.baseline.seed = stage_seed(self.seed, "baseline")

    @property
    def init_seed(self) -> int:
        return stage_seed(self.seed, "init")

    @property
    def vstar_seed(self) -> int:
        return stage_seed(self.seed, "vstar")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Identity of the experiment; output paths are not part of it."""
        d = self.to_dict()
        d.pop("out")
        d.pop("eval")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def stage_hash(self, stage: str) -> str:
        """Hash of only the sections a trained artifact depends on."""
        sections = {"pretrain": ("seed", "corpus", "model", "pretrain"),
                    "baseline": ("seed", "corpus", "baseline")}[stage]
        d = {k: v for k, v in self.to_dict().items() if k in sections}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls()
        for key, value in _flatten(d):
            set_path(cfg, key, value)
        cfg.derive_seeds()
        return cfg


def stage_seed(root: int, stage: str) -> int:
    ss = np.random.SeedSequence([root, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def _coerce(raw, current, key: str):
    """Convert ``raw`` (str from env/flags, or JSON value) to the type of ``current``."""
    try:
        if isinstance(current, bool):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("true", "1", "yes"):
                return True
            if s in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = json.loads(raw) if isinstance(raw, str) else list(raw)
            if len(items) != len(current):
                raise ValueError(raw)
            return tuple(type(c)(x) for c, x in zip(current, items))
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {type(current).__name__}") from exc


def set_path(cfg: ExperimentConfig, key: str, raw) -> None:
    parts = key.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, p):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} is a section, not a value")
    setattr(obj, leaf, _coerce(raw, current, key))


def _revalidate(cfg: ExperimentConfig) -> None:
    # re-run each section's __post_init__ checks after piecemeal assignment
    try:
        for f in dataclasses.fields(cfg):
            sub = getattr(cfg, f.name)
            if dataclasses.is_dataclass(sub):
                setattr(cfg, f.name, type(sub)(**asdict(sub)))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def env_overrides(environ=None) -> list[tuple[str, str]]:
    environ = os.environ if environ is None else environ
    out = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            out.append((name[len(ENV_PREFIX):].lower().replace("__", "."), environ[name]))
    return out


def load_config(path: str | Path | None = None, overrides: list[tuple[str, object]] = (),
                environ=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in _flatten(data):
            set_path(cfg, key, value)
    for key, value in env_overrides(environ):
        set_path(cfg, key, value)
    for key, value in overrides:
        set_path(cfg, key, value)
    _revalidate(cfg)
    cfg.derive_seeds()
    return cfg
