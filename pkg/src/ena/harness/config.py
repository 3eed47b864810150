"""Run configuration: one JSON document, overridable field by field."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..errors import ConfigError
from ..hybrid import HybridConfig
from .tasks import TASK_CHANNELS, TASK_KINDS

OUTPUT_ENV = "ENA_OUTPUT_DIR"
DTYPES = {"float32": np.float32, "float64": np.float64}


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "ena_runs")


@dataclass
class OptimConfig:
    lr: float = 3e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 50
    cosine: bool = True
    min_lr_ratio: float = 0.0
    grad_clip: float = 1.0

    def validate(self) -> None:
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.warmup < 0 or self.grad_clip < 0:
            raise ConfigError("eps must be positive; warmup and grad_clip nonnegative")
        if not 0 <= self.min_lr_ratio <= 1:
            raise ConfigError("min_lr_ratio must lie in [0, 1]")


@dataclass
class TaskConfig:
    kind: str = "local_pattern"
    grid: tuple = (16, 16)
    classes: int = 4
    samples: int = 2048
    val_samples: int = 512
    seed: int = 0
    location: str = "random"
    decoys: int = 3

    def options(self) -> dict:
        if self.kind == "local_pattern":
            return {"location": self.location, "decoys": self.decoys}
        return {}

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task {self.kind!r}; expected {TASK_KINDS}")
        if self.samples < 1 or self.val_samples < 1:
            raise ConfigError("samples and val_samples must be positive")
        if self.decoys < 0:
            raise ConfigError("decoys must be nonnegative")


def default_model() -> HybridConfig:
    """Two-layer delta + sliding-tile model sized for the 16x16 ``local_pattern`` task."""
    return HybridConfig.ena(2, window=(6, 6), tile=(2, 2), d_model=16, heads=2, grid=(16, 16),
                            num_classes=4, chunk=32, channels=TASK_CHANNELS["local_pattern"])


def merge_model(doc: dict) -> HybridConfig:
    """Model fields from ``doc`` over :func:`default_model`.

    Per-layer lists (windows, scans) are only inherited when the layer layout
    (num_layers, schedule) is inherited too.
    """
    base = default_model().to_dict()
    if "num_layers" in doc or "schedule" in doc:
        base.pop("windows")
        base.pop("scans")
        if "schedule" not in doc:
            base.pop("schedule")
    return HybridConfig.from_dict({**base, **doc})


@dataclass
class RunConfig:
    model: HybridConfig = field(default_factory=default_model)
    optim: OptimConfig = field(default_factory=OptimConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    steps: int = 200
    batch_size: int = 16
    seed: int = 0
    dtype: str = "float64"
    log_every: int = 10
    eval_every: int = 0
    output_dir: str | None = None
    name: str = "run"
    target_accuracy: float | None = None
    max_steps: int | None = None

    def validate(self, with_task: bool = True) -> "RunConfig":
        """Check every field; ``with_task=False`` skips model/task agreement (caller supplies data)."""
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1 or self.eval_every < 0:
            raise ConfigError("steps >= 0, batch_size >= 1, log_every >= 1 and eval_every >= 0 are required")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be nonnegative")
        if self.target_accuracy is not None:
            if not 0 < self.target_accuracy <= 1:
                raise ConfigError("target_accuracy must lie in (0, 1]")
            if not self.eval_every:
                raise ConfigError("target_accuracy needs eval_every > 0")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        self.optim.validate()
        self.task.validate()
        self.model.validate()
        if not with_task:
            return self
        if tuple(self.task.grid) != tuple(self.model.grid):
            raise ConfigError(f"task grid {tuple(self.task.grid)} differs from model grid {self.model.grid}")
        channels = TASK_CHANNELS[self.task.kind]
        if self.model.channels != channels:
            raise ConfigError(f"{self.task.kind} images have {channels} channel(s); model expects {self.model.channels}")
        classes = 2 if self.task.kind == "global_count" else self.task.classes
        if self.model.head != "classify" or self.model.num_classes != classes:
            raise ConfigError(f"model must classify into {classes} classes")
        return self

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["optim"] = asdict(self.optim)
        d["task"] = {**asdict(self.task), "grid": list(self.task.grid)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run fields {sorted(unknown)}")
        try:
            if "model" in d:
                d["model"] = merge_model(d["model"])
            if "optim" in d:
                d["optim"] = OptimConfig(**d["optim"])
            if "task" in d:
                task = dict(d["task"])
                if "grid" in task:
                    task["grid"] = tuple(task["grid"])
                d["task"] = TaskConfig(**task)
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc


def reference_run() -> RunConfig:
    """The pinned two-layer run whose final accuracy is kept in the golden log."""
    return RunConfig(model=default_model(), optim=OptimConfig(lr=5e-3, warmup=50), task=TaskConfig(),
                     steps=2000, batch_size=8, seed=0, dtype="float64", log_every=100, name="reference")


def set_path(doc: dict, dotted: str, value) -> None:
    """Set ``a.b.c`` in a nested dict, creating intermediate dicts."""
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key=value`` strings (values parsed as JSON when possible)."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        set_path(doc, key.strip(), parse_value(value))
    return doc
