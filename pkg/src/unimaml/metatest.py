"""Meta-test treatments and statistical evaluation."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import network as nw
from .episodes import (
    ClassPool,
    Episode,
    EpisodeSpec,
    MAX_ENUMERATION_N,
    Permutation,
    enumerate_permutations,
    episode_seed,
    rotated_permutations,
    sample_episode,
    with_sorted_labels,
)
from .errors import CapacityError
from .maml import InnerLoopConfig, inner_loop
from .network import ParamSet

STRATEGIES = (
    "none",
    "init_support_acc",
    "init_support_loss",
    "updated_support_acc",
    "updated_support_loss",
    "ensemble_full",
    "ensemble_rotated",
    "averaged_init",
)
CLI_NAMES = {
    "none": "none",
    "init-acc": "init_support_acc",
    "init-loss": "init_support_loss",
    "upd-acc": "updated_support_acc",
    "upd-loss": "updated_support_loss",
    "ens-full": "ensemble_full",
    "ens-rot": "ensemble_rotated",
    "avg-init": "averaged_init",
}
_SELECTION = STRATEGIES[1:5]
_ENUMERATING = _SELECTION + ("ensemble_full",)

LEDGER_SCHEMA_VERSION = 1
LEDGER_FIELDS = ["schema_version", "strategy", "n_tasks", "mean_acc", "ci95", "steps", "seed"]


def parse_strategy(name: str) -> str:
    kind = CLI_NAMES.get(name, name)
    if kind not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}")
    return kind


@dataclass
class EvalReport:
    per_task_acc: list[float]
    mean_acc: float
    ci95: float
    task_count: int
    strategy: str
    steps: int
    seed: int

    @classmethod
    def from_accuracies(cls, accs, strategy: str = "none", steps: int = 0, seed: int = 0) -> EvalReport:
        """Mean accuracy and 95% interval, both in percent.

        The interval is ``1.96 * s / sqrt(T)`` with ``s`` the sample standard
        deviation; a single task gets an interval of 0.
        """
        accs = [float(a) for a in accs]
        if not accs:
            raise ValueError("no task accuracies to summarise")
        t = len(accs)
        s = float(np.std(accs, ddof=1)) if t > 1 else 0.0
        return cls(
            per_task_acc=accs,
            mean_acc=100.0 * float(np.mean(accs)),
            ci95=100.0 * 1.96 * s / math.sqrt(t),
            task_count=t,
            strategy=strategy,
            steps=steps,
            seed=seed,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))

    def summary(self) -> str:
        return f"{self.strategy}: {self.mean_acc:.2f} +- {self.ci95:.2f} % over {self.task_count} tasks (M={self.steps})"


def results_ledger_append(report: EvalReport, path: str | Path) -> None:
    """Append one row to a CSV ledger, writing the header on first use."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LEDGER_FIELDS)
        if fresh:
            writer.writeheader()
        writer.writerow(
            {
                "schema_version": LEDGER_SCHEMA_VERSION,
                "strategy": report.strategy,
                "n_tasks": report.task_count,
                "mean_acc": repr(report.mean_acc),
                "ci95": repr(report.ci95),
                "steps": report.steps,
                "seed": report.seed,
            }
        )


def adapt_and_score(params: ParamSet, episode: Episode, cfg: InnerLoopConfig) -> tuple[float, list[float], list[float]]:
    """Adapt step by step, recording support and query accuracy after each step.

    Both traces start with the accuracy of the initialization, so they have
    ``cfg.steps + 1`` entries.
    """
    params = nw.expand_for(params, episode.n_way)
    one_step = InnerLoopConfig(steps=1, alpha=cfg.alpha, freeze_encoder=cfg.freeze_encoder)
    support_trace = [nw.accuracy(params, episode.support_x, episode.support_y)]
    query_trace = [nw.accuracy(params, episode.query_x, episode.query_y)]
    for _ in range(cfg.steps):
        params = inner_loop(params, episode.support_x, episode.support_y, one_step)
        support_trace.append(nw.accuracy(params, episode.support_x, episode.support_y))
        query_trace.append(nw.accuracy(params, episode.query_x, episode.query_y))
    return query_trace[-1], support_trace, query_trace


@dataclass
class StrategyOutcome:
    predictions: np.ndarray
    accuracy: float
    permutation: Permutation | None = None


def average_posteriors(posteriors: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Mean of per-model class probabilities and the resulting 1-based predictions."""
    avg = np.mean(np.stack([np.atleast_2d(p) for p in posteriors]), axis=0)
    return avg, np.argmax(avg, axis=1) + 1


def _check_strategy(kind: str, n_way: int) -> None:
    if kind not in STRATEGIES:
        raise ValueError(f"unknown strategy {kind!r}")
    if kind in _ENUMERATING and n_way > MAX_ENUMERATION_N:
        raise CapacityError(f"strategy {kind} enumerates {n_way}! permutations; n_way must be <= {MAX_ENUMERATION_N}")


def _select(params: ParamSet, episode: Episode, kind: str, cfg: InnerLoopConfig) -> tuple[Permutation, ParamSet]:
    """Pick a head pairing by a support-set criterion; return it with its adapted model."""
    maximize = kind.endswith("_acc")
    updated = kind.startswith("updated")
    best = None
    for pi in enumerate_permutations(episode.n_way):
        candidate = nw.permute_heads(params, pi)
        if updated:
            candidate = inner_loop(candidate, episode.support_x, episode.support_y, cfg)
        if maximize:
            score = -nw.accuracy(candidate, episode.support_x, episode.support_y)
        else:
            score = nw.batch_loss(candidate, episode.support_x, episode.support_y)
        if best is None or score < best[0]:
            best = (score, pi, candidate)
    _, pi, chosen = best
    if not updated:
        chosen = inner_loop(chosen, episode.support_x, episode.support_y, cfg)
    return pi, chosen


def run_strategy(params: ParamSet, episode: Episode, strategy: str, cfg: InnerLoopConfig) -> StrategyOutcome:
    """Adapt to ``episode`` under a meta-test treatment and score the query set."""
    kind = parse_strategy(strategy)
    _check_strategy(kind, episode.n_way)
    params = nw.expand_for(params, episode.n_way)
    pi = None

    if kind in ("ensemble_full", "ensemble_rotated"):
        perms = enumerate_permutations(episode.n_way) if kind == "ensemble_full" else rotated_permutations(episode.n_way)
        posteriors = []
        for p in perms:
            adapted = inner_loop(nw.permute_heads(params, p), episode.support_x, episode.support_y, cfg)
            posteriors.append(nw.softmax(nw.forward_logits(adapted, episode.query_x)))
        _, preds = average_posteriors(posteriors)
    else:
        if kind in _SELECTION:
            pi, adapted = _select(params, episode, kind, cfg)
        else:
            if kind == "averaged_init":
                params = nw.average_heads(params)
            adapted = inner_loop(params, episode.support_x, episode.support_y, cfg)
        preds = nw.predict(adapted, episode.query_x)
    return StrategyOutcome(preds, float(np.mean(preds == episode.query_y)), pi)


def held_out_episode(pool: ClassPool, spec: EpisodeSpec, seed: int, index: int, fixed_order: bool = False) -> Episode:
    ep = sample_episode(pool, spec, episode_seed(seed, "test", index))
    return with_sorted_labels(ep) if fixed_order else ep


def evaluate(
    params: ParamSet,
    pool: ClassPool,
    spec: EpisodeSpec,
    strategy: str,
    cfg: InnerLoopConfig,
    n_tasks: int,
    seed: int,
    threads: int = 1,
    fixed_order: bool = False,
) -> EvalReport:
    """Mean query accuracy of a treatment over ``n_tasks`` held-out episodes.

    ``fixed_order`` labels each episode's classes in ascending global-id
    order (the deterministic assignment MAML-FO trains with).
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    if pool.split == "base":
        raise ValueError("evaluation draws from held-out classes; got the base split")
    kind = parse_strategy(strategy)
    _check_strategy(kind, spec.n_way)

    def one(i: int) -> float:
        return run_strategy(params, held_out_episode(pool, spec, seed, i, fixed_order), kind, cfg).accuracy

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            accs = list(ex.map(one, range(n_tasks)))
    else:
        accs = [one(i) for i in range(n_tasks)]
    return EvalReport.from_accuracies(accs, kind, cfg.steps, seed)


def write_per_task_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "query_acc"])
        for i, a in enumerate(report.per_task_acc):
            writer.writerow([i, repr(a)])
