"""Run configuration and its flat ``key = value`` text format.

Lines are ``key = value``; ``#`` starts a comment. Tuples are comma separated,
booleans are ``true``/``false``. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .models import NetSpec
from .schedule import LrSchedule, TemperatureSchedule

LOSS_TERMS = ("inner", "local", "global")


@dataclass(frozen=True)
class DistillConfig:
    """Loss, graph and optimizer hyperparameters."""

    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    tau: float = 4.0
    tau2_scaling: bool = False
    tau_g: float = 0.1
    tau_g_floor: float = 1e-3
    warmup_epochs: int = 15
    k: int = 5
    sigma: str = "median"
    mutual_knn: bool = False
    local_neighbors_only: bool = False
    graph_reduction: str = "mean"
    tokens_per_instance: int = 4
    num_tokens: int = 0
    instance_level: bool = False
    lr: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    lr_milestones: tuple[int, ...] = (150, 180, 210)
    lr_factor: float = 0.1
    ablate: tuple[str, ...] = ()

    def active(self, term: str) -> bool:
        return term not in self.ablate

    @property
    def sigma_value(self):
        """``"median"`` or the fixed bandwidth as a float."""
        if self.sigma == "median":
            return "median"
        return float(self.sigma)

    def temperature_schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.tau_g, self.warmup_epochs, self.tau_g_floor)

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, tuple(self.lr_milestones), self.lr_factor, self.warmup_epochs)

    def validate(self) -> None:
        for name in ("alpha", "beta", "gamma", "lam", "weight_decay", "momentum", "lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("tau", "tau_g", "tau_g_floor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.tokens_per_instance < 1:
            raise ConfigError("tokens_per_instance must be at least 1")
        if self.warmup_epochs < 2:
            raise ConfigError("warmup_epochs must be at least 2")
        bad = [t for t in self.ablate if t not in LOSS_TERMS + ("kd",)]
        if bad:
            raise ConfigError(f"ablate: unknown loss terms {bad}; choose from {LOSS_TERMS + ('kd',)}")
        if self.graph_reduction not in ("mean", "sum"):
            raise ConfigError(f"graph_reduction must be 'mean' or 'sum', got {self.graph_reduction!r}")
        if self.sigma != "median":
            try:
                s = float(self.sigma)
            except ValueError:
                raise ConfigError(f"sigma must be 'median' or a positive number, got {self.sigma!r}") from None
            if not s > 0:
                raise ConfigError("sigma must be positive")


@dataclass(frozen=True)
class RunConfig(DistillConfig):
    """Everything needed to reproduce one run.

    ``warmup_frac`` and ``milestone_fracs`` express the warm-up length and the
    learning-rate milestones as fractions of ``epochs``; ``resolved()`` turns
    them into the integer epoch values used by the schedules.
    """

    seed: int = 0
    epochs: int = 40
    batch_size: int = 64
    warmup_frac: float = 1.0 / 16.0
    milestone_fracs: tuple[float, ...] = (0.625, 0.75, 0.875)
    dataset: str = "synth"
    dataset_path: str = ""
    dataset_format: str = ""
    num_classes: int = 10
    per_class: int = 250
    channels: int = 1
    image_size: int = 8
    noise: float = 0.45
    data_seed: int = 0
    test_fraction: float = 0.2
    imbalance_rate: float = 1.0
    teacher_arch: str = "mlp"
    teacher_widths: tuple[int, ...] = (4, 64, 64)
    teacher_patch: int = 2
    teacher_epochs: int = 30
    teacher_lr: float = 0.1
    teacher_batch_size: int = 64
    teacher_seed: int = 1000
    student_arch: str = "mlp"
    student_widths: tuple[int, ...] = (4, 8)
    student_patch: int = 2
    output_dir: str = ""
    force: bool = False
    log_wallclock: bool = False

    def resolved(self) -> "RunConfig":
        w = max(2, int(self.epochs * self.warmup_frac + 0.5))
        ms = tuple(int(self.epochs * f + 0.5) for f in self.milestone_fracs)
        return replace(self, warmup_epochs=w, lr_milestones=ms)

    def teacher_spec(self) -> NetSpec:
        return NetSpec(self.teacher_arch, tuple(self.teacher_widths), self.num_classes,
                       self.channels, self.image_size, self.teacher_patch, self.teacher_seed)

    def student_spec(self) -> NetSpec:
        return NetSpec(self.student_arch, tuple(self.student_widths), self.num_classes,
                       self.channels, self.image_size, self.student_patch, self.seed)

    def teacher_lr_schedule(self) -> LrSchedule:
        e = self.teacher_epochs
        w = max(1, int(e * self.warmup_frac + 0.5))
        ms = tuple(int(e * f + 0.5) for f in self.milestone_fracs)
        return LrSchedule(self.teacher_lr, ms, self.lr_factor, w)

    def validate(self) -> None:
        super().validate()
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 2 or self.teacher_batch_size < 2:
            raise ConfigError("batch_size and teacher_batch_size must be at least 2")
        if self.imbalance_rate < 1:
            raise ConfigError("imbalance_rate must be >= 1")
        if self.dataset not in ("synth", "file"):
            raise ConfigError(f"dataset must be 'synth' or 'file', got {self.dataset!r}")
        if self.dataset == "file" and not self.dataset_path:
            raise ConfigError("dataset_path is required when dataset = file")
        self.teacher_spec().validate()
        self.student_spec().validate()

    def hash(self) -> str:
        return _digest(self, exclude=_NON_TRAINING_KEYS)

    def teacher_hash(self) -> str:
        return _digest(self, include=TEACHER_KEYS)


TEACHER_KEYS = (
    "dataset", "dataset_path", "dataset_format", "num_classes", "per_class", "channels",
    "image_size", "noise", "data_seed", "test_fraction", "imbalance_rate", "teacher_batch_size",
    "teacher_arch", "teacher_widths", "teacher_patch", "teacher_epochs", "teacher_lr",
    "teacher_seed", "momentum", "nesterov", "weight_decay", "lr_factor", "warmup_frac",
    "milestone_fracs",
)
_NON_TRAINING_KEYS = ("output_dir", "force", "log_wallclock")


def _digest(cfg, include=None, exclude=()) -> str:
    lines = [
        ln for ln in to_text(cfg).splitlines()
        if ln and not ln.startswith("#")
        and (include is None or ln.split(" = ")[0] in include)
        and ln.split(" = ")[0] not in exclude
    ]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(cfg) -> str:
    lines = [f"# {type(cfg).__name__}"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def _parse_scalar(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


_TUPLE_ITEM = {"lr_milestones": 0, "teacher_widths": 0, "student_widths": 0,
               "milestone_fracs": 0.0, "ablate": ""}


def parse_value(key: str, raw: str, cls=None):
    cls = cls or RunConfig
    defaults = {f.name: f.default for f in fields(cls)}
    if key not in defaults:
        raise ConfigError(f"unknown config key {key!r}")
    like = defaults[key]
    raw = raw.strip()
    if isinstance(like, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(_parse_scalar(s, _TUPLE_ITEM[key], key) for s in items)
    return _parse_scalar(raw, like, key)


def from_text(text: str, base=None):
    cfg = base if base is not None else RunConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        updates[key] = parse_value(key, raw, type(cfg))
    return replace(cfg, **updates)


def load_config(path, base=None):
    return from_text(Path(path).read_text(), base)


def save_config(cfg, path) -> None:
    Path(path).write_text(to_text(cfg))
