"""JSON experiment configuration with field-path validation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .autodiff import SgdConfig
from .divergence import KINDS
from .federation import METHODS, FederationConfig
from .rng import derive_seed

DATASET_KINDS = ("toy", "synthetic", "idx")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field (e.g. ``partition.alpha``)."""

    def __init__(self, path: str, message: str, line: int | None = None):
        self.path, self.message, self.line = path, message, line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{path}: {message}" if path else f"{where}{message}")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    # toy
    n_per_class: int = 100
    n_test_per_class: int = 500
    radius: float = 3.0
    # synthetic
    n_train: int = 60000
    n_test: int = 2000
    input_dim: int = 64
    n_classes: int = 10
    modes_per_class: int = 3
    noise: float = 1.0
    spread: float = 1.0
    data_seed: int = 0
    # idx
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass(frozen=True)
class PartitionConfig:
    alpha: float = 1.0
    train_fraction: float = 1.0
    seed: int | None = None


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64,)
    latent_dim: int = 32
    latent_activation: str = "relu"


@dataclass(frozen=True)
class BoundConfig:
    enabled: bool = False
    delta: float = 0.1
    kind: str = "linear2d"
    lambda_budget: int = 300
    m_mode: str = "min"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    bound: BoundConfig = field(default_factory=BoundConfig)
    output_dir: str = "runs/default"

    @property
    def root_seed(self) -> int:
        return self.federation.seed

    @property
    def partition_seed(self) -> int:
        if self.partition.seed is not None:
            return self.partition.seed
        return derive_seed(self.root_seed, "partition") & 0x7FFFFFFF

    @property
    def input_dim(self) -> int:
        return 2 if self.dataset.kind == "toy" else self.dataset.input_dim

    @property
    def n_classes(self) -> int:
        return 2 if self.dataset.kind == "toy" else self.dataset.n_classes

    def layer_sizes(self, input_dim: int | None = None, n_classes: int | None = None
                    ) -> tuple[int, ...]:
        return (input_dim or self.input_dim, *self.model.hidden, self.model.latent_dim,
                n_classes or self.n_classes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"]["hidden"] = list(self.model.hidden)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_value(self, path: str, value) -> "ExperimentConfig":
        """Copy with one dotted field replaced (re-validated)."""
        data = self.to_dict()
        section, _, leaf = path.partition(".")
        if leaf:
            data[section][leaf] = value
        else:
            data[section] = value
        return parse_config(data)


# -- validation --------------------------------------------------------------

_SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "federation": FederationConfig,
    "model": ModelConfig,
    "sgd": SgdConfig,
    "bound": BoundConfig,
}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(path: str, value, default, annotation: str):
    """Type-check ``value`` against the field's declared type."""
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "must not be null")
    if annotation.startswith("tuple"):
        if not isinstance(value, (list, tuple)) or not all(_is_int(v) for v in value):
            raise ConfigError(path, "must be a list of integers")
        return tuple(value)
    if annotation.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(path, "must be true or false")
        return value
    if annotation.startswith("int"):
        if _is_number(value) and float(value).is_integer():
            return int(value)
        raise ConfigError(path, "must be an integer")
    if annotation.startswith("float"):
        if not _is_number(value):
            raise ConfigError(path, "must be a number")
        return float(value)
    if annotation.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(path, "must be a string")
        return value
    return value


def _check(path: str, ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(path, message)


def _validate_section(name: str, values: dict) -> None:
    v = values
    if name == "dataset":
        _check("dataset.kind", v["kind"] in DATASET_KINDS, f"must be one of {DATASET_KINDS}")
        for key in ("n_per_class", "n_test_per_class", "n_train", "n_test", "input_dim",
                    "modes_per_class"):
            _check(f"dataset.{key}", v[key] >= 1, "must be >= 1")
        _check("dataset.n_classes", v["n_classes"] >= 2, "must be >= 2")
        _check("dataset.radius", v["radius"] > 0, "must be > 0")
        _check("dataset.noise", v["noise"] >= 0, "must be >= 0")
        if v["kind"] == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                _check(f"dataset.{key}", bool(v[key]), "is required for idx datasets")
    elif name == "partition":
        _check("partition.alpha", v["alpha"] > 0, f"must be > 0, got {v['alpha']}")
        _check("partition.train_fraction", 0 < v["train_fraction"] <= 1,
               f"must be in (0, 1], got {v['train_fraction']}")
    elif name == "federation":
        _check("federation.K", v["K"] >= 1, "must be >= 1")
        _check("federation.active_fraction", 0 < v["active_fraction"] <= 1, "must be in (0, 1]")
        _check("federation.rounds", v["rounds"] >= 1, "must be >= 1")
        _check("federation.local_steps", v["local_steps"] >= 1, "must be >= 1")
        _check("federation.method", v["method"] in METHODS, f"must be one of {METHODS}")
        for key in ("m_k", "generator_steps"):
            _check(f"federation.{key}", v[key] >= 0, "must be >= 0")
        for key in ("w_gen", "beta", "lambda_grl"):
            _check(f"federation.{key}", v[key] >= 0, "must be >= 0")
        _check("federation.generator_lr", v["generator_lr"] > 0, "must be > 0")
        for key in ("generator_batch", "generator_hidden", "threads"):
            _check(f"federation.{key}", v[key] >= 1, "must be >= 1")
        if v["grl_decay_rounds"] is not None:
            _check("federation.grl_decay_rounds", v["grl_decay_rounds"] >= 1, "must be >= 1")
        _check("federation.epoch_unit", v["epoch_unit"] in ("batch", "pass"),
               "must be 'batch' or 'pass'")
    elif name == "model":
        _check("model.hidden", all(h >= 1 for h in v["hidden"]), "widths must be >= 1")
        _check("model.latent_dim", v["latent_dim"] >= 1, "must be >= 1")
        _check("model.latent_activation", v["latent_activation"] in ("relu", "none"),
               "must be 'relu' or 'none'")
    elif name == "sgd":
        _check("sgd.learning_rate", v["learning_rate"] > 0, "must be > 0")
        _check("sgd.batch_size", v["batch_size"] >= 1, "must be >= 1")
    elif name == "bound":
        _check("bound.delta", 0 < v["delta"] < 1, "must be in (0, 1)")
        _check("bound.kind", v["kind"] in KINDS, f"must be one of {KINDS}")
        _check("bound.lambda_budget", v["lambda_budget"] >= 0, "must be >= 0")
        _check("bound.m_mode", v["m_mode"] in ("min", "per_pair"), "must be 'min' or 'per_pair'")


def _parse_section(name: str, cls, raw) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be an object")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    defaults = cls()
    values = {}
    for fname, f in known.items():
        default = getattr(defaults, fname)
        ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        values[fname] = (_coerce(f"{name}.{fname}", raw[fname], default, ann)
                         if fname in raw else default)
    _validate_section(name, values)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None


def _parse_dataset_string(text: str) -> dict:
    """``toy``, ``synthetic`` or ``idx:<train_images>,<train_labels>,<test_images>,<test_labels>``."""
    if text in ("toy", "synthetic"):
        return {"kind": text}
    if text.startswith("idx:"):
        parts = text[4:].split(",")
        if len(parts) != 4 or not all(parts):
            raise ConfigError("dataset", "idx datasets need four comma-separated paths")
        keys = ("train_images", "train_labels", "test_images", "test_labels")
        return {"kind": "idx", **dict(zip(keys, parts))}
    raise ConfigError("dataset", f"unknown dataset {text!r}")


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be an object")
    if "config" in data and "config_hash" in data:
        # a run manifest; replay its config snapshot
        data = data["config"]
    data = copy.deepcopy(data)
    for key in data:
        if key not in _SECTIONS and key != "output_dir":
            raise ConfigError(key, "unknown field")
    if isinstance(data.get("dataset"), str):
        data["dataset"] = _parse_dataset_string(data["dataset"])
    sections = {name: _parse_section(name, cls, data.get(name)) for name, cls in _SECTIONS.items()}
    out_dir = data.get("output_dir", ExperimentConfig().output_dir)
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("output_dir", "must be a non-empty string")
    cfg = ExperimentConfig(output_dir=out_dir, **sections)
    _validate_cross(cfg)
    return cfg


def _validate_cross(cfg: ExperimentConfig) -> None:
    if cfg.dataset.kind == "toy" and cfg.federation.K != 3:
        raise ConfigError("federation.K", "the toy dataset has exactly 3 clients")
    if cfg.bound.enabled and cfg.bound.kind == "threshold1d" and cfg.model.latent_dim != 1:
        raise ConfigError("bound.kind", "threshold1d needs model.latent_dim == 1")


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno) from None
    return parse_config(data)


def resolve_axis(axis: str) -> str:
    """Dotted path for a sweep axis; a bare leaf name must be unique across sections."""
    if "." in axis:
        section, _, leaf = axis.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None or leaf not in {f.name for f in fields(cls)}:
            raise ConfigError(axis, "unknown sweep axis")
        return axis
    hits = [f"{name}.{axis}" for name, cls in _SECTIONS.items()
            if axis in {f.name for f in fields(cls)}]
    if len(hits) != 1:
        raise ConfigError(axis, "unknown sweep axis" if not hits else f"ambiguous axis: {hits}")
    return hits[0]


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, federation=replace(cfg.federation, seed=int(seed)))


__all__ = [
    "ConfigError", "DatasetConfig", "PartitionConfig", "ModelConfig", "BoundConfig",
    "ExperimentConfig", "parse_config", "load_config", "resolve_axis", "with_seed",
]
