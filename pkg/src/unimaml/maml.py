"""First-order MAML: inner loop, meta-gradients, training variants, pre-training."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import network as nw
from .episodes import (
    ClassPool,
    Episode,
    EpisodeSpec,
    MAX_ENUMERATION_N,
    Permutation,
    apply_permutation,
    enumerate_permutations,
    episode_seed,
    sample_episode,
    with_sorted_labels,
)
from .errors import CapacityError, HeadModeError
from .network import GradSet, OuterOptimizer, ParamSet

VARIANTS = ("vanilla", "fo", "pm", "unicorn")


@dataclass(frozen=True)
class InnerLoopConfig:
    steps: int = 5
    alpha: float = 0.05
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "vanilla"
    epochs: int = 30
    tasks_per_epoch: int = 100
    task_batch_size: int = 1
    spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    inner: InnerLoopConfig = field(default_factory=InnerLoopConfig)
    # The query loss is summed over N * q_query items, so the usual
    # mean-loss rates (1e-3 encoder, 1e-2 heads) are scaled down ~75x.
    lr_encoder: float = 1e-5
    lr_heads: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_epochs: int = 20
    decay_factor: float = 0.1
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 0 or self.tasks_per_epoch < 1 or self.task_batch_size < 1:
            raise ValueError("epochs >= 0, tasks_per_epoch >= 1 and task_batch_size >= 1 required")
        if self.variant == "pm" and self.spec.n_way > MAX_ENUMERATION_N:
            raise CapacityError(f"MAML-PM searches all permutations; n_way must be <= {MAX_ENUMERATION_N}")

    def optimizer(self) -> OuterOptimizer:
        return OuterOptimizer(
            lr_encoder=self.lr_encoder,
            lr_heads=self.lr_heads,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            decay_factor=self.decay_factor,
            decay_epochs=self.decay_epochs,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    mean_query_loss: float
    mean_query_acc: float
    lr_encoder: float
    lr_heads: float
    wall_ms: float


def inner_loop(params: ParamSet, support_x, support_y, cfg: InnerLoopConfig) -> ParamSet:
    """``cfg.steps`` plain gradient steps on the summed support loss."""
    if params.shared:
        raise HeadModeError("inner loop needs per-class heads; duplicate the shared head first")
    adapted = params
    for _ in range(cfg.steps):
        _, g = nw.batch_loss_and_grad(adapted, support_x, support_y, encoder_grad=not cfg.freeze_encoder)
        adapted = nw.sgd_step(adapted, g, cfg.alpha, update_encoder=not cfg.freeze_encoder)
    return adapted


def fo_meta_grad(params: ParamSet, episode: Episode, cfg: InnerLoopConfig) -> tuple[float, GradSet, float]:
    """Query loss, first-order meta-gradient and query accuracy for one task.

    The gradient of the query loss at the adapted parameters stands in for
    the gradient with respect to the initialization.
    """
    adapted = inner_loop(params, episode.support_x, episode.support_y, cfg)
    loss, grad = nw.batch_loss_and_grad(adapted, episode.query_x, episode.query_y)
    acc = nw.accuracy(adapted, episode.query_x, episode.query_y)
    return loss, grad, acc


def unicorn_meta_grad(params: ParamSet, episode: Episode, cfg: InnerLoopConfig) -> tuple[float, GradSet, float]:
    """Meta-gradient for a single shared head duplicated across all classes."""
    if not params.shared:
        raise HeadModeError("unicorn_meta_grad needs a shared head")
    loss, grad, acc = fo_meta_grad(nw.duplicate_head(params, episode.n_way), episode, cfg)
    return loss, nw.aggregate_head_grads(grad), acc


def select_permutation_min_support_loss(params: ParamSet, episode: Episode) -> Permutation:
    """Head permutation with the smallest pre-adaptation support loss.

    Ties go to the lexicographically first permutation. To use the result
    on the data side, relabel the episode by its inverse.
    """
    if params.shared:
        raise HeadModeError("permutation search needs per-class heads")
    if episode.n_way > MAX_ENUMERATION_N:
        raise CapacityError(f"n_way {episode.n_way} exceeds the enumeration limit {MAX_ENUMERATION_N}")
    best, best_loss = None, np.inf
    for pi in enumerate_permutations(episode.n_way):
        loss = nw.batch_loss(nw.permute_heads(params, pi), episode.support_x, episode.support_y)
        if loss < best_loss:
            best, best_loss = pi, loss
    return best


def task_meta_grad(params: ParamSet, episode: Episode, cfg: TrainConfig) -> tuple[float, GradSet, float]:
    """Dispatch one training task through the variant's pipeline."""
    if cfg.variant == "unicorn":
        return unicorn_meta_grad(params, episode, cfg.inner)
    if cfg.variant == "fo":
        episode = with_sorted_labels(episode)
    elif cfg.variant == "pm":
        pi = select_permutation_min_support_loss(params, episode)
        episode = apply_permutation(episode, pi.inverse())
    return fo_meta_grad(params, episode, cfg.inner)


def average_grads(grads: list[GradSet]) -> GradSet:
    """Mean of gradients, summed in list order."""
    if len(grads) == 1:
        return grads[0]
    total = [a.copy() for a in grads[0].arrays()]
    for g in grads[1:]:
        nw.check_congruent(grads[0], g)
        for t, a in zip(total, g.arrays()):
            t += a
    return grads[0].with_arrays([t / len(grads) for t in total])


def _check_head_mode(params: ParamSet, cfg: TrainConfig) -> None:
    if cfg.variant == "unicorn" and not params.shared:
        raise HeadModeError("unicorn-MAML trains a single shared head; got per-class heads")
    if cfg.variant != "unicorn":
        if params.shared:
            raise HeadModeError(f"variant {cfg.variant!r} needs per-class heads; got a shared head")
        if params.n_heads != cfg.spec.n_way:
            raise HeadModeError(f"{params.n_heads} heads for a {cfg.spec.n_way}-way task")


def meta_train(
    pool: ClassPool,
    cfg: TrainConfig,
    init: ParamSet,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[ParamSet, list[EpochLog]]:
    """Outer-loop training on episodes drawn from ``pool``.

    Episode ``i`` of the run is drawn with seed ``(cfg.seed, "train", i)``,
    so the task stream does not depend on batching or threading.
    """
    _check_head_mode(init, cfg)
    params = init
    opt = cfg.optimizer()
    log: list[EpochLog] = []
    pool_exec = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 and cfg.task_batch_size > 1 else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            losses, accs = [], []
            first = epoch * cfg.tasks_per_epoch
            for start in range(0, cfg.tasks_per_epoch, cfg.task_batch_size):
                stop = min(start + cfg.task_batch_size, cfg.tasks_per_epoch)
                episodes = [
                    sample_episode(pool, cfg.spec, episode_seed(cfg.seed, "train", first + i))
                    for i in range(start, stop)
                ]
                snapshot = params
                if pool_exec is None:
                    results = [task_meta_grad(snapshot, ep, cfg) for ep in episodes]
                else:
                    results = list(pool_exec.map(lambda ep: task_meta_grad(snapshot, ep, cfg), episodes))
                for loss, _, acc in results:
                    losses.append(loss)
                    accs.append(acc)
                params = nw.outer_step(opt, params, average_grads([g for _, g, _ in results]), epoch)
            if not np.isfinite(losses).all():
                raise TrainingDiverged(f"non-finite query loss in epoch {epoch}; lower the outer learning rates")
            lr_enc, lr_head = opt.learning_rates(epoch)
            entry = EpochLog(
                epoch=epoch,
                mean_query_loss=float(np.mean(losses)),
                mean_query_acc=float(np.mean(accs)),
                lr_encoder=lr_enc,
                lr_heads=lr_head,
                wall_ms=1000.0 * (time.perf_counter() - t0),
            )
            log.append(entry)
            if on_epoch is not None:
                on_epoch(entry)
    finally:
        if pool_exec is not None:
            pool_exec.shutdown()
    return params, log


def write_train_log(log: list[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_query_loss", "mean_query_acc", "lr_encoder", "lr_heads", "wall_ms"])
        for e in log:
            writer.writerow(
                [e.epoch, repr(e.mean_query_loss), repr(e.mean_query_acc), e.lr_encoder, e.lr_heads, f"{e.wall_ms:.1f}"]
            )


def pretrain_encoder(
    pool: ClassPool,
    epochs: int,
    lr: float,
    seed: int,
    layer_sizes=(64, 32),
    batch_size: int = 64,
) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Train the encoder with a throwaway head over all classes of ``pool``.

    Plain many-way classification with mean cross-entropy and momentum SGD.
    Only the encoder layers are returned.
    """
    if pool.n_classes == 0 or pool.min_examples() == 0:
        raise ValueError("cannot pre-train on an empty pool")
    if pool.split != "base":
        raise ValueError(f"pre-training uses the base split, got {pool.split!r}")
    params = nw.init_params(pool.dim, layer_sizes, pool.n_classes, seed)
    x = np.concatenate(pool.examples)
    y = np.concatenate([np.full(len(ex), c + 1, dtype=np.int64) for c, ex in enumerate(pool.examples)])
    opt = OuterOptimizer(lr_encoder=lr, lr_heads=lr, decay_epochs=max(epochs, 1))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            _, g = nw.batch_loss_and_grad(params, x[idx], y[idx])
            g = g.with_arrays([a / len(idx) for a in g.arrays()])
            params = nw.outer_step(opt, params, g, epoch)
    return params.layers


def attach_heads(
    layers: tuple[tuple[np.ndarray, np.ndarray], ...],
    n_way: int,
    seed: int,
    shared: bool = False,
) -> ParamSet:
    """Fresh random heads on top of a given encoder."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    feature_dim = layers[-1][0].shape[0]
    heads = nw.random_heads(1 if shared else n_way, feature_dim, rng)
    return ParamSet(tuple((W.copy(), b.copy()) for W, b in layers), heads, shared)
