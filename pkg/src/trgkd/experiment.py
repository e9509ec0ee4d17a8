"""Glue shared by the command line, the scripts and the acceptance checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

from .config import RunConfig
from .data import LabeledDataset, load_dataset, long_tail_subsample, stratified_split, synth_dataset
from .errors import ConfigError
from .losses import Projection
from .models import ToyNet, build_net
from .train import MetricRecord, TrainState, distill, evaluate, load_teacher, pretrain_teacher, save_teacher

log = logging.getLogger(__name__)

# Loss configurations of the ablation table: name -> config overrides
ABLATION_PRESET: dict[str, dict] = {
    "baseline": {"ablate": ("kd", "inner", "local", "global")},
    "kd": {"ablate": ("inner", "local", "global")},
    "wo_graph": {"ablate": ("local", "global")},
    "wo_global": {"ablate": ("global",)},
    "instance": {"instance_level": True},
    "full": {},
}

# Student and loss settings used for the desk-scale direction experiments.
# The library defaults keep alpha = beta = gamma = 1. At this scale the inner
# term needs a larger weight to matter, and the global term hurts unless it
# is kept light; the README lists the measurements behind these values.
DESK_OVERRIDES: dict = {"lr": 0.1, "student_widths": (4, 16), "alpha": 30.0, "gamma": 0.03}
# Seeds 0..4 were used to choose DESK_OVERRIDES; the acceptance runs use fresh ones.
DESK_SEEDS = (5, 6, 7, 8, 9)


def prepare_data(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/test splits; the long-tail profile is applied to the training split only."""
    if cfg.dataset == "synth":
        ds = synth_dataset(cfg.num_classes, cfg.per_class, cfg.channels, cfg.image_size,
                           cfg.image_size, cfg.noise, cfg.data_seed)
    elif cfg.dataset == "file":
        if not cfg.dataset_path:
            raise ConfigError("dataset_path is required when dataset = file")
        shape = (cfg.channels, cfg.image_size, cfg.image_size)
        ds = load_dataset(cfg.dataset_path, cfg.dataset_format or None, shape, cfg.num_classes)
    else:
        raise ConfigError(f"dataset must be 'synth' or 'file', got {cfg.dataset!r}")
    train, test = stratified_split(ds, cfg.test_fraction, cfg.data_seed)
    if cfg.imbalance_rate > 1:
        train = replace(long_tail_subsample(train, cfg.imbalance_rate, cfg.data_seed), split="train")
    return train, test


def train_teacher(cfg: RunConfig, train: LabeledDataset) -> tuple[ToyNet, list[MetricRecord]]:
    return pretrain_teacher(build_net(cfg.teacher_spec()), train, cfg)


def cached_teacher(cfg: RunConfig, train: LabeledDataset, cache_dir) -> ToyNet:
    """Load the teacher for ``cfg`` from ``cache_dir`` or pretrain and store it there."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"teacher-{cfg.teacher_hash()[:16]}.ckpt"
    if path.exists():
        net, _, h = load_teacher(path)
        if h == cfg.teacher_hash():
            return net
    net, recs = train_teacher(cfg, train)
    save_teacher(path, net, cfg.teacher_hash(), recs[-1].accuracy if recs else 0.0)
    return net


def make_student(cfg: RunConfig, teacher: ToyNet) -> tuple[ToyNet, Projection]:
    student = build_net(cfg.student_spec(), teacher=cfg.teacher_spec())
    m = None if cfg.instance_level else (cfg.num_tokens or teacher.native_tokens)
    in_dim = student.feature_dim if cfg.instance_level else student.token_dim(m)
    out_dim = teacher.feature_dim if cfg.instance_level else teacher.token_dim(m)
    return student, Projection(in_dim, out_dim, seed=cfg.seed)


@dataclass
class RunResult:
    name: str
    seed: int
    final_accuracy: float
    best_accuracy: float
    mean_kld: float
    mul: float
    final_loss: float
    first_loss: float
    state: TrainState
    records: list[MetricRecord]

    def row(self) -> dict:
        return {"name": self.name, "seed": self.seed, "final_accuracy": self.final_accuracy,
                "best_accuracy": self.best_accuracy, "mean_kld": self.mean_kld, "mul": self.mul,
                "first_loss": self.first_loss, "final_loss": self.final_loss}


def run_distill(cfg: RunConfig, teacher: ToyNet, train: LabeledDataset, test: LabeledDataset,
                name: str = "run", out_dir=None) -> RunResult:
    cfg = cfg.resolved()
    student, proj = make_student(cfg, teacher)
    state, records = distill(teacher, student, proj, train, test, cfg, out_dir=out_dir)
    tests = [r for r in records if r.split == "test"] or [r for r in records if r.split == "train"]
    trains = [r for r in records if r.split == "train"]
    last = tests[-1]
    return RunResult(name, cfg.seed, last.accuracy, max(r.accuracy for r in tests), last.mean_kld,
                     last.mul, trains[-1].loss["total"], trains[0].loss["total"], state, records)
