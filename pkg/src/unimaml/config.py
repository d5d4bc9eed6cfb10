"""Run configuration: JSON file sections merged with command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .episodes import EpisodeSpec
from .maml import InnerLoopConfig, TrainConfig


class UsageError(Exception):
    """Bad command line or configuration."""


@dataclass
class DataSettings:
    n_base: int = 50
    n_validation: int = 10
    n_novel: int = 10
    dim: int = 16
    per_class: int = 40
    sigma: float = 0.3


@dataclass
class ModelSettings:
    layer_sizes: list[int] = field(default_factory=lambda: [64, 32])


@dataclass
class PretrainSettings:
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 64


@dataclass
class TrainSettings:
    variant: str = "vanilla"
    epochs: int = 30
    tasks_per_epoch: int = 100
    task_batch_size: int = 1
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    steps: int = 5
    alpha: float = 0.05
    freeze_encoder: bool = False
    lr_encoder: float = 1e-5
    lr_heads: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_epochs: int = 20
    decay_factor: float = 0.1


@dataclass
class EvalSettings:
    # None means: the strategy the checkpoint's variant implies, and the
    # inner loop (M, alpha) the checkpoint was trained with.
    strategy: str | None = None
    n_tasks: int = 1000
    steps: int | None = None
    alpha: float | None = None


@dataclass
class AnalysisSettings:
    spread_tasks: int = 200
    curve_tasks: int = 1000
    max_steps: int = 30
    sweep_alphas: list[float] = field(default_factory=lambda: [0.005, 0.05, 0.5])
    sweep_steps: list[int] = field(default_factory=lambda: [1, 5, 15])
    sweep_eval_tasks: int = 200


@dataclass
class PathSettings:
    out: str = "runs/default"
    pool: str | None = None
    checkpoint: str | None = None
    pretrained: str | None = None
    ledger: str | None = None


@dataclass
class RunConfig:
    seed: int | None = None
    threads: int | None = None
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    # --- derived views -------------------------------------------------

    @property
    def out(self) -> Path:
        return Path(self.paths.out)

    def pool_path(self) -> Path:
        return Path(self.paths.pool) if self.paths.pool else self.out / "pool.fscp"

    def manifest_path(self) -> Path:
        p = self.pool_path()
        return p.with_name(p.stem + ".splits.json")

    def checkpoint_path(self) -> Path:
        return Path(self.paths.checkpoint) if self.paths.checkpoint else self.out / "model.umck"

    def ledger_path(self) -> Path:
        return Path(self.paths.ledger) if self.paths.ledger else self.out / "results.csv"

    def spec(self) -> EpisodeSpec:
        t = self.train
        return EpisodeSpec(t.n_way, t.k_shot, t.q_query)

    def inner(self) -> InnerLoopConfig:
        return InnerLoopConfig(self.train.steps, self.train.alpha, self.train.freeze_encoder)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            variant=t.variant,
            epochs=t.epochs,
            tasks_per_epoch=t.tasks_per_epoch,
            task_batch_size=t.task_batch_size,
            spec=self.spec(),
            inner=self.inner(),
            lr_encoder=t.lr_encoder,
            lr_heads=t.lr_heads,
            momentum=t.momentum,
            weight_decay=t.weight_decay,
            decay_epochs=t.decay_epochs,
            decay_factor=t.decay_factor,
            seed=self.seed,
            threads=self.threads or 1,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _merge(target, values: dict, where: str) -> None:
    known = {f.name: f for f in fields(target)}
    for key, value in values.items():
        if key not in known:
            raise UsageError(f"unknown config key {where}{key!r}")
        current = getattr(target, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise UsageError(f"config section {where}{key!r} must be an object")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(target, key, value)


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        values = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    _merge(cfg, values, "")
    return cfg
