"""Experiment configuration: INI file with sections, ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "mixture"  # or "csv"
    num_classes: int = 4
    input_dim: int = 16
    separation: float = 5.0
    noise: float = 1.0
    n_train: int = 100  # per class, mixture only
    n_val: int = 50
    n_test: int = 200
    shots: int = 2  # 0 disables K-shot splitting
    label_fraction: float = 0.0  # used when shots == 0
    train_csv: str = ""
    val_csv: str = ""
    test_csv: str = ""
    carve_validation: bool = False
    normalize: bool = False


@dataclass
class TeacherSetup:
    source: str = "oracle"  # or "file"
    path: str = ""
    prototypes: str = "means"  # "means" (mixture only) or a CSV path
    noise: float = 0.0
    corruption_rate: float = 0.0
    target_accuracy: float = 0.0  # > 0 calibrates corruption_rate
    stratified: bool = True


@dataclass
class ModelConfig:
    mode: str = "dho"
    hidden: str = "64,64"
    feature_dim: int = 32
    kd_head: str = "linear"
    cosine_scale: float = 0.01
    class_embeddings: str = ""  # CSV path or "prototypes"; enables language-aware head init

    @property
    def hidden_dims(self) -> tuple:
        return tuple(int(h) for h in self.hidden.split(",") if h.strip())


@dataclass
class InferenceConfig:
    alphas: str = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
    betas: str = "0.1,0.3,0.5,0.7,1.0,2.0"

    @property
    def alpha_grid(self) -> tuple:
        return parse_floats(self.alphas)

    @property
    def beta_grid(self) -> tuple:
        return parse_floats(self.betas)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherSetup = field(default_factory=TeacherSetup)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        """Digest of the resolved config, excluding the seed."""
        d = self.to_dict()
        d["train"].pop("seed")
        blob = json.dumps(d, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def write_ini(self, path) -> None:
        cp = configparser.ConfigParser()
        for name, values in self.to_dict().items():
            cp[name] = {k: str(v) for k, v in values.items()}
        with open(Path(path), "w", encoding="utf-8") as fh:
            cp.write(fh)


SECTIONS = ("data", "teacher", "model", "train", "inference")


def parse_floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _coerce(value: str, typ, where: str):
    try:
        if typ is bool or typ == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int or typ == "int":
            return int(value)
        if typ is float or typ == "float":
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {getattr(typ, '__name__', typ)}") from None


def _set(section_obj, key: str, value: str, where: str):
    known = {f.name: f.type for f in fields(section_obj)}
    if key not in known:
        raise ConfigError(f"{where}: unknown key {key!r}")
    setattr(section_obj, key, _coerce(value, known[key], where))


def load_config(path: Optional[str] = None, overrides=()) -> ExperimentConfig:
    """Defaults <- INI file <- ``section.key=value`` overrides."""
    parts = {name: {} for name in SECTIONS}
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for sec in cp.sections():
            if sec not in parts:
                raise ConfigError(f"unknown section [{sec}]")
            parts[sec].update(cp[sec])
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        lhs, value = ov.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        if sec not in parts:
            raise ConfigError(f"override {ov!r}: unknown section {sec!r}")
        parts[sec][key.strip()] = value

    cfg = ExperimentConfig()
    staged = {name: asdict(getattr(cfg, name)) for name in SECTIONS}
    for sec, values in parts.items():
        obj = getattr(cfg, sec)
        for key, value in values.items():
            _set(obj, key, value, f"[{sec}] {key}")
        staged[sec] = asdict(obj)
    try:
        cfg.train = TrainConfig(**staged["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[train]: {exc}") from None
    if cfg.model.mode not in ("sho", "dho"):
        raise ConfigError(f"[model] mode must be sho or dho, got {cfg.model.mode!r}")
    if cfg.data.source not in ("mixture", "csv"):
        raise ConfigError(f"[data] source must be mixture or csv, got {cfg.data.source!r}")
    if cfg.teacher.source not in ("oracle", "file"):
        raise ConfigError(f"[teacher] source must be oracle or file, got {cfg.teacher.source!r}")
    return cfg
