"""The desk-scale synthetic benchmark used by the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field

from .episodes import ClassPool, EpisodeSpec, generate_synthetic_pool, split_pool
from .maml import InnerLoopConfig, TrainConfig, attach_heads, meta_train, pretrain_encoder
from .metatest import EvalReport, evaluate
from .network import ParamSet


@dataclass(frozen=True)
class DeskConfig:
    n_base: int = 50
    n_novel: int = 10
    dim: int = 16
    per_class: int = 40
    sigma: float = 0.3
    layer_sizes: tuple[int, ...] = (64, 32)
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.05
    spec: EpisodeSpec = field(default_factory=lambda: EpisodeSpec(5, 1, 15))
    epochs: int = 30
    tasks_per_epoch: int = 100
    alpha: float = 0.05
    eval_tasks: int = 1000


@dataclass
class DeskSetup:
    cfg: DeskConfig
    seed: int
    base: ClassPool
    novel: ClassPool
    encoder: tuple

    def init(self, shared: bool = False) -> ParamSet:
        return attach_heads(self.encoder, self.cfg.spec.n_way, self.seed, shared=shared)

    def train_config(self, variant: str = "vanilla", steps: int = 5, **overrides) -> TrainConfig:
        c = self.cfg
        return TrainConfig(
            variant=variant,
            epochs=c.epochs,
            tasks_per_epoch=c.tasks_per_epoch,
            spec=c.spec,
            inner=InnerLoopConfig(steps, c.alpha),
            seed=self.seed,
            **overrides,
        )


def desk_setup(seed: int, cfg: DeskConfig | None = None) -> DeskSetup:
    """Synthetic pool split into base/novel classes plus an encoder pre-trained on base."""
    cfg = cfg or DeskConfig()
    pool = generate_synthetic_pool(cfg.n_base + cfg.n_novel, cfg.dim, cfg.per_class, cfg.sigma, seed)
    splits = split_pool(pool, cfg.n_base, 0, cfg.n_novel)
    encoder = pretrain_encoder(splits["base"], cfg.pretrain_epochs, cfg.pretrain_lr, seed, cfg.layer_sizes)
    return DeskSetup(cfg, seed, splits["base"], splits["novel"], encoder)


def desk_run(setup: DeskSetup, variant: str = "vanilla", steps: int = 5, strategy: str = "none") -> tuple[ParamSet, EvalReport]:
    """Meta-train one variant and evaluate it on the novel classes with the same M."""
    tc = setup.train_config(variant, steps)
    params, _ = meta_train(setup.base, tc, setup.init(shared=variant == "unicorn"))
    report = evaluate(
        params,
        setup.novel,
        tc.spec,
        strategy,
        tc.inner,
        setup.cfg.eval_tasks,
        setup.seed,
        fixed_order=variant == "fo",
    )
    return params, report
