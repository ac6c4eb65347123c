"""Experiment configuration: strict JSON schema with ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "parse_overrides", "config_hash"]

SCHEDULES = ("loss_based", "naive", "always_A")
TRANSPORTS = ("memory", "tcp")
DATASETS = ("synthetic", "cifar10")
PRECISIONS = ("float32", "float64")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class ExperimentConfig:
    # model
    model: str = "vgg_desk"
    width: int = 8
    cut: str | int = "small"
    precision: str = "float32"
    # training
    clients: int = 1
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.05
    seed: int = 0
    # communication
    schedule: str = "loss_based"
    l_thred: float = 0.02
    naive_budget: int | None = None
    quantize: bool = False
    transport: str = "memory"
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 0
    # data
    dataset: str = "synthetic"
    n_train: int = 2000
    n_test: int = 500
    classes: int = 10
    image_size: int = 8
    difficulty: float = 2.5
    cifar_path: str | None = None
    subset_size: int | None = None
    # experiment commands
    thresholds: list = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1])
    privacy_samples: int = 256

    def problems(self) -> list[str]:
        out = []

        def need(cond, msg):
            if not cond:
                out.append(msg)

        need(self.model == "vgg_desk", f"model: unknown model {self.model!r}")
        need(_is_int(self.width) and self.width >= 1, "width: must be a positive integer")
        need(self.cut in ("small", "large") or (_is_int(self.cut) and self.cut >= 1),
             "cut: must be 'small', 'large' or a positive layer index")
        need(self.precision in PRECISIONS, f"precision: must be one of {PRECISIONS}")
        need(_is_int(self.clients) and 1 <= self.clients <= 0xFFFF, "clients: must be in [1, 65535]")
        need(_is_int(self.epochs) and self.epochs >= 1, "epochs: must be >= 1")
        need(_is_int(self.batch_size) and self.batch_size >= 1, "batch_size: must be >= 1")
        need(_is_num(self.lr) and self.lr > 0, "lr: must be > 0")
        need(_is_int(self.seed) and self.seed >= 0, "seed: must be a non-negative integer")
        need(self.schedule in SCHEDULES, f"schedule: must be one of {SCHEDULES}")
        need(_is_num(self.l_thred) and self.l_thred >= 0, "l_thred: must be >= 0")
        if self.schedule == "naive":
            need(_is_int(self.naive_budget) and 1 <= self.naive_budget <= self.epochs
                 if _is_int(self.epochs) else False,
                 "naive_budget: must be in [1, epochs] for the naive schedule")
        elif self.naive_budget is not None:
            need(_is_int(self.naive_budget) and self.naive_budget >= 1, "naive_budget: must be >= 1")
        need(isinstance(self.quantize, bool), "quantize: must be true or false")
        need(self.transport in TRANSPORTS, f"transport: must be one of {TRANSPORTS}")
        need(isinstance(self.tcp_host, str), "tcp_host: must be a string")
        need(_is_int(self.tcp_port) and 0 <= self.tcp_port <= 65535, "tcp_port: must be in [0, 65535]")
        need(self.dataset in DATASETS, f"dataset: must be one of {DATASETS}")
        need(_is_int(self.n_train) and self.n_train >= 1, "n_train: must be >= 1")
        need(_is_int(self.n_test) and self.n_test >= 1, "n_test: must be >= 1")
        need(_is_int(self.classes) and 2 <= self.classes <= 0xFFFF, "classes: must be in [2, 65535]")
        need(_is_int(self.image_size) and self.image_size >= 4 and self.image_size % 4 == 0,
             "image_size: must be a positive multiple of 4")
        need(_is_num(self.difficulty) and self.difficulty >= 0, "difficulty: must be >= 0")
        if self.dataset == "cifar10":
            need(isinstance(self.cifar_path, str) and self.cifar_path != "",
                 "cifar_path: required for the cifar10 dataset")
        need(self.subset_size is None or (_is_int(self.subset_size) and self.subset_size >= 2),
             "subset_size: must be null or >= 2")
        need(isinstance(self.thresholds, list) and len(self.thresholds) > 0
             and all(_is_num(t) and t >= 0 for t in self.thresholds),
             "thresholds: must be a non-empty list of numbers >= 0")
        need(_is_int(self.privacy_samples) and self.privacy_samples >= 2, "privacy_samples: must be >= 2")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError(["config must be a JSON object"])
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown key" for k in unknown]
                              + [f"{p}" for p in cls(**{k: v for k, v in data.items() if k in known}).problems()])
        return cls(**data).validate()


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def parse_overrides(pairs) -> dict:
    """``["k=v", ...]`` to a dict; values are parsed as JSON when possible."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError([f"override {pair!r}: expected key=value"])
        key, raw = pair.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Read a JSON config (or start from defaults) and apply overrides."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: config must be a JSON object"])
    data.update(overrides or {})
    return ExperimentConfig.from_dict(data)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.canonical().encode("utf-8")).hexdigest()[:16]
