"""Run configuration: dataclasses, strict dict loading and dotted overrides."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import Dims

MODES = ("source_only", "dann", "b", "d", "d_r", "dtr")
TAU_FLOOR = 0.5


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


@dataclass
class OptimConfig:
    lr: float = 0.001
    lr_g: float = 0.001
    lr_fd: float = 0.1  # the discriminator must keep pace with the reversed features
    momentum: float = 0.9
    weight_decay: float = 0.05


@dataclass
class TrainConfig:
    mode: str = "dtr"
    alpha: float = 1.0
    beta: float = 0.15
    gamma: float = 1.0
    theta: float = 0.05
    r: int = 5
    tau: float = 0.9
    iterations: int = 1000
    batch_size: int = 64
    seed: int = 0
    log_interval: int = 50
    eval_interval: int = 50
    detach_p: bool = True
    cls_d_to_g: bool = True
    shared_g_optimizer: bool = True
    alpha_schedule: str = "constant"  # "constant" | "warmup"
    dims: Dims = field(default_factory=Dims)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {', '.join(MODES)}")
        if self.alpha_schedule not in ("constant", "warmup"):
            raise ConfigError("alpha_schedule", "must be 'constant' or 'warmup'")
        if self.r < 1:
            raise ConfigError("r", "r >= 1 required")
        if not TAU_FLOOR <= self.tau <= 1.0:
            raise ConfigError("tau", f"{TAU_FLOOR} <= tau <= 1 required")
        for name in ("alpha", "beta", "gamma", "theta"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"{name} >= 0 required")
        if self.iterations < 0:
            raise ConfigError("iterations", "iterations >= 0 required")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "batch_size >= 1 required")
        if self.log_interval < 1:
            raise ConfigError("log_interval", "log_interval >= 1 required")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval", "eval_interval >= 1 required")
        if min(self.optim.lr, self.optim.lr_g, self.optim.lr_fd) < 0:
            raise ConfigError("optim.lr", "learning rates must be >= 0")
        if not 0.0 <= self.optim.momentum < 1.0:
            raise ConfigError("optim.momentum", "0 <= momentum < 1 required")
        if self.optim.weight_decay < 0:
            raise ConfigError("optim.weight_decay", "weight_decay >= 0 required")
        for name in ("input_dim", "d_g", "d_di", "d_ds", "hidden", "n_classes"):
            if getattr(self.dims, name) < 1:
                raise ConfigError(f"dims.{name}", ">= 1 required")


@dataclass
class DataConfig:
    kind: str = "gaussian"  # "gaussian" | "moons" | "idx"
    n_classes: int = 3
    input_dim: int = 2
    n_source: int = 600
    n_target: int = 600
    radius: float = 2.5
    cluster_std: float = 1.0
    rotation_deg: float = 45.0
    translation: list | None = None
    scale: list | None = None
    class_noise: list | None = None
    outlier_fraction: float = 0.0
    outlier_shift: float = 0.0
    standardize: bool = True
    seed: int = 0
    source_images: str = ""
    source_labels: str = ""
    target_images: str = ""
    target_labels: str = ""
    per_class: int = 100
    resize_to: int = 16

    def validate(self) -> None:
        if self.kind not in ("gaussian", "moons", "idx"):
            raise ConfigError("data.kind", "must be one of gaussian, moons, idx")
        if self.n_classes < 2:
            raise ConfigError("data.n_classes", ">= 2 required")
        if self.kind != "idx" and min(self.n_source, self.n_target) < self.n_classes:
            raise ConfigError("data.n_source", "each domain needs at least n_classes samples")
        if self.kind != "idx" and not self.cluster_std > 0:
            raise ConfigError("data.cluster_std", "> 0 required (zero variance is degenerate)")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ConfigError("data.outlier_fraction", "must lie in [0, 1]")
        if self.kind == "idx":
            for name in ("source_images", "source_labels", "target_images", "target_labels"):
                if not getattr(self, name):
                    raise ConfigError(f"data.{name}", "path required for kind=idx")
            if self.per_class < 1:
                raise ConfigError("data.per_class", ">= 1 required")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        self.train.validate()
        self.data.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- loading

def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return _from_dict(tp, value, path + ".")
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(path, f"expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise ConfigError(path, f"expected an integer, got {value!r}") from None
        if f != int(f):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(f)
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(path, f"expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(path, f"expected a number, got {value!r}") from None
    if tp is str:
        return str(value)
    if tp is list or origin is list:
        if isinstance(value, str):
            value = json.loads(value)
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    return value


def _from_dict(cls, doc: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(prefix + key, "unknown configuration key")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in doc.items()}
    return cls(**kwargs)


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = _from_dict(RunConfig, doc)
    cfg.validate()
    return cfg


def _split_override(item: str) -> tuple[list[str], str]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    # bare training keys are accepted without the "train." prefix
    if parts[0] not in ("train", "data"):
        parts = ["train"] + parts
    return parts, value.strip()


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        parts, raw = _split_override(item)
        cls: Any = RunConfig
        node = doc
        for depth, part in enumerate(parts):
            fields = {f.name: f for f in dataclasses.fields(cls)}
            if part not in fields:
                raise ConfigError(".".join(parts[: depth + 1]), "unknown configuration key")
            tp = typing.get_type_hints(cls)[part]
            if depth == len(parts) - 1:
                try:
                    value: Any = json.loads(raw)
                except json.JSONDecodeError:
                    value = raw
                node[part] = value
            else:
                if not dataclasses.is_dataclass(tp):
                    raise ConfigError(".".join(parts[: depth + 1]), "is not a section")
                node = node.setdefault(part, {})
                cls = tp
    return doc


def parse_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Load a JSON config (``None`` means all defaults) and apply ``key=value`` overrides."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"malformed JSON: {exc}") from None
    doc = apply_overrides(doc, overrides or [])
    return run_config_from_dict(doc)
