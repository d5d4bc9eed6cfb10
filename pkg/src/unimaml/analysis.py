"""Diagnostic experiments: permutation spread, step curves, sweeps, head baselines."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import network as nw
from . import svg
from .episodes import ClassPool, EpisodeSpec, enumerate_permutations
from .maml import InnerLoopConfig, TrainConfig, inner_loop, meta_train
from .metatest import adapt_and_score, evaluate, held_out_episode
from .errors import HeadModeError
from .network import ParamSet


def _map(fn: Callable[[int], object], n: int, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, range(n)))
    return [fn(i) for i in range(n)]


@dataclass
class SpreadResult:
    rank_avg_acc: list[float]
    per_task_spread: list[float]

    def histogram(self, bin_width: float = 1.0) -> dict[float, int]:
        """Counts of rank-averaged accuracies (percent) in fixed-width bins keyed by left edge."""
        counts: dict[float, int] = {}
        for a in self.rank_avg_acc:
            left = math.floor(100.0 * a / bin_width) * bin_width
            counts[left] = counts.get(left, 0) + 1
        return dict(sorted(counts.items()))


def permutation_spread(
    params: ParamSet,
    pool: ClassPool,
    spec: EpisodeSpec,
    cfg: InnerLoopConfig,
    n_tasks: int,
    seed: int,
    threads: int = 1,
) -> SpreadResult:
    """Score every head pairing per task, sort, and average across tasks by rank.

    Tasks are the same held-out episodes :func:`evaluate` draws for ``seed``.
    """
    perms = enumerate_permutations(spec.n_way)

    def one(i: int) -> np.ndarray:
        ep = held_out_episode(pool, spec, seed, i)
        base = nw.expand_for(params, spec.n_way)
        accs = [
            nw.accuracy(inner_loop(nw.permute_heads(base, pi), ep.support_x, ep.support_y, cfg), ep.query_x, ep.query_y)
            for pi in perms
        ]
        return np.sort(np.asarray(accs))[::-1]

    ranked = np.array(_map(one, n_tasks, threads))
    return SpreadResult(
        rank_avg_acc=[float(v) for v in ranked.mean(axis=0)],
        per_task_spread=[float(v) for v in ranked[:, 0] - ranked[:, -1]],
    )


@dataclass
class StepsCurve:
    """Mean query accuracy (percent) after each inner step; index 0 is the initialization."""

    acc_at_step: list[float]
    ci95_at_step: list[float]
    freeze_encoder: bool = False


def steps_curve(
    params: ParamSet,
    pool: ClassPool,
    spec: EpisodeSpec,
    alpha: float,
    max_steps: int,
    freeze_encoder: bool,
    n_tasks: int,
    seed: int,
    threads: int = 1,
) -> StepsCurve:
    if max_steps < 0:
        raise ValueError("max_steps must be >= 0")
    cfg = InnerLoopConfig(steps=max_steps, alpha=alpha, freeze_encoder=freeze_encoder)

    def one(i: int) -> list[float]:
        return adapt_and_score(params, held_out_episode(pool, spec, seed, i), cfg)[2]

    traces = np.array(_map(one, n_tasks, threads))
    sd = traces.std(axis=0, ddof=1) if n_tasks > 1 else np.zeros(traces.shape[1])
    return StepsCurve(
        acc_at_step=[float(v) for v in 100.0 * traces.mean(axis=0)],
        ci95_at_step=[float(v) for v in 100.0 * 1.96 * sd / math.sqrt(n_tasks)],
        freeze_encoder=freeze_encoder,
    )


def randomized_head_baseline(
    params: ParamSet,
    pool: ClassPool,
    spec: EpisodeSpec,
    cfg: InnerLoopConfig,
    n_tasks: int,
    seed: int,
    threads: int = 1,
) -> tuple[StepsCurve, StepsCurve]:
    """Step curves for the learned heads and for fresh random heads on the same encoder."""
    if params.shared:
        raise HeadModeError("the randomized-head baseline needs per-class heads")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    randomized = replace(params, heads=nw.random_heads(params.n_heads, params.feature_dim, rng))
    args = (pool, spec, cfg.alpha, cfg.steps, cfg.freeze_encoder, n_tasks, seed, threads)
    return steps_curve(params, *args), steps_curve(randomized, *args)


@dataclass
class SweepResult:
    alphas: list[float]
    steps: list[int]
    grid: list[list[float]]
    ci95: list[list[float]]

    @property
    def best(self) -> tuple[float, int]:
        """(alpha, M) of the most accurate cell; the first one on ties."""
        flat = np.asarray(self.grid)
        r, c = np.unravel_index(int(np.argmax(flat)), flat.shape)
        return self.alphas[r], self.steps[c]


def train_and_evaluate(
    base: ClassPool,
    novel: ClassPool,
    init: ParamSet,
    cfg: TrainConfig,
    n_eval_tasks: int,
    seed: int,
):
    """Meta-train under ``cfg`` then evaluate with the same inner loop."""
    trained, _ = meta_train(base, cfg, init)
    return evaluate(trained, novel, cfg.spec, "none", cfg.inner, n_eval_tasks, seed, threads=cfg.threads)


def hyper_sweep(
    base: ClassPool,
    novel: ClassPool,
    init: ParamSet,
    template: TrainConfig,
    alphas: Sequence[float],
    steps: Sequence[int],
    n_eval_tasks: int,
    seed: int,
) -> SweepResult:
    """Train and evaluate one model per (alpha, M) cell under the same budget.

    Every cell sees the same training and test episode streams.
    """
    if not alphas or not steps:
        raise ValueError("sweep grids must be non-empty")
    grid, ci = [], []
    for a in alphas:
        row, row_ci = [], []
        for m in steps:
            cfg = replace(template, inner=replace(template.inner, alpha=float(a), steps=int(m)), seed=seed)
            report = train_and_evaluate(base, novel, init, cfg, n_eval_tasks, seed)
            row.append(report.mean_acc)
            row_ci.append(report.ci95)
        grid.append(row)
        ci.append(row_ci)
    return SweepResult([float(a) for a in alphas], [int(m) for m in steps], grid, ci)


# --- outputs ----------------------------------------------------------------


def write_spread(result: SpreadResult, csv_path: str | Path, svg_path: str | Path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "rank_avg_acc"])
        for r, a in enumerate(result.rank_avg_acc, start=1):
            writer.writerow([r, repr(a)])
    hist = result.histogram()
    svg.write(
        svg.bar_chart(
            [f"{k:g}" for k in hist],
            list(hist.values()),
            "Rank-averaged accuracy over permutations",
            "accuracy (%), 1-point bins",
            "permutations",
        ),
        svg_path,
    )


def write_curves(curves: dict[str, StepsCurve], csv_path: str | Path, svg_path: str | Path, title: str) -> None:
    names = list(curves)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"{n}_{col}" for n in names for col in ("acc", "ci95")])
        for step in range(len(curves[names[0]].acc_at_step)):
            row = [step]
            for n in names:
                row += [repr(curves[n].acc_at_step[step]), repr(curves[n].ci95_at_step[step])]
            writer.writerow(row)
    svg.write(
        svg.line_chart({n: c.acc_at_step for n, c in curves.items()}, title, "inner-loop step", "query accuracy (%)"),
        svg_path,
    )


def write_sweep(result: SweepResult, csv_path: str | Path, svg_path: str | Path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "steps", "mean_acc", "ci95"])
        for a, row, row_ci in zip(result.alphas, result.grid, result.ci95):
            for m, v, c in zip(result.steps, row, row_ci):
                writer.writerow([a, m, repr(v), repr(c)])
    svg.write(
        svg.heat_grid(
            result.grid,
            [f"{a:g}" for a in result.alphas],
            [str(m) for m in result.steps],
            "Meta-test accuracy by inner step size and step count",
            "inner steps M",
            "alpha",
        ),
        svg_path,
    )
