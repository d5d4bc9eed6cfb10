"""Command-line entry point.

Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, maml, metatest
from . import network as nw
from .config import RunConfig, UsageError, load_config
from .episodes import EpisodeSpec, generate_synthetic_pool, load_split, save_manifest, save_pool, split_pool
from .errors import CapacityError, FormatError, HeadModeError

log = logging.getLogger("unimaml")

COMMANDS = ("gen-data", "pretrain", "train", "eval", "spread", "curve", "sweep", "baseline")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unimaml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="global seed (required here or in the config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads (default: CPU count)")
        p.add_argument("--variant", choices=maml.VARIANTS)
        p.add_argument("--strategy", choices=list(metatest.CLI_NAMES))
        p.add_argument("--steps", type=int, help="inner-loop steps M")
        p.add_argument("--alpha", type=float, help="inner-loop step size")
        p.add_argument("--tasks", type=int, help="number of evaluation tasks")
        p.add_argument("--epochs", type=int, help="meta-training (or pre-training) epochs")
        p.add_argument("--max-steps", type=int, help="longest inner loop for step curves")
        p.add_argument("--freeze-encoder", action="store_true", default=None)
        p.add_argument("--pool", help="pool file (default: OUT/pool.fscp)")
        p.add_argument("--checkpoint", help="model checkpoint (default: OUT/model.umck)")
        p.add_argument("--init", help="pre-trained encoder checkpoint to start from")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.seed is None:
        raise UsageError("a seed is required (--seed or \"seed\" in the config)")
    if not 0 <= int(cfg.seed) < 2**64:
        raise UsageError("seed must be an unsigned 64-bit integer")
    if args.threads is not None:
        cfg.threads = args.threads
    if cfg.threads is None:
        cfg.threads = os.cpu_count() or 1
    if cfg.threads < 1:
        raise UsageError("--threads must be >= 1")
    for flag, section, key in [
        ("out", cfg.paths, "out"),
        ("pool", cfg.paths, "pool"),
        ("checkpoint", cfg.paths, "checkpoint"),
        ("init", cfg.paths, "pretrained"),
        ("variant", cfg.train, "variant"),
        ("max_steps", cfg.analysis, "max_steps"),
        ("freeze_encoder", cfg.train, "freeze_encoder"),
    ]:
        value = getattr(args, flag)
        if value is not None:
            setattr(section, key, value)
    if args.strategy is not None:
        cfg.eval.strategy = metatest.parse_strategy(args.strategy)
    if args.steps is not None:
        cfg.train.steps = cfg.eval.steps = args.steps
    if args.alpha is not None:
        cfg.train.alpha = cfg.eval.alpha = args.alpha
    if args.epochs is not None:
        if args.command == "pretrain":
            cfg.pretrain.epochs = args.epochs
        else:
            cfg.train.epochs = args.epochs
    if args.tasks is not None:
        cfg.eval.n_tasks = cfg.analysis.spread_tasks = cfg.analysis.curve_tasks = args.tasks
        cfg.analysis.sweep_eval_tasks = args.tasks
    try:
        cfg.train_config()
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid training settings: {exc}") from exc
    return cfg


# --- output helpers ---------------------------------------------------------


def _fresh(path: Path) -> Path:
    if path.exists():
        raise FileExistsError(f"refusing to overwrite {path}; outputs are write-once, pick a new --out")
    return path


def _write_json(path: Path, obj) -> None:
    _fresh(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo_config(cfg: RunConfig, name: str) -> None:
    """Record the effective config; repeated commands in one directory get numbered copies."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    path, n = cfg.out / f"{name}.config.json", 1
    while path.exists():
        n += 1
        path = cfg.out / f"{name}.{n}.config.json"
    _write_json(path, cfg.to_dict())


def _load_model(cfg: RunConfig) -> tuple[nw.ParamSet, dict]:
    params, meta = nw.load_checkpoint(cfg.checkpoint_path())
    if meta.get("kind") != "model":
        raise FormatError(f"{cfg.checkpoint_path()}: not a meta-trained model checkpoint", offset=12)
    return params, meta


def _eval_inner(cfg: RunConfig, meta: dict) -> maml.InnerLoopConfig:
    steps = cfg.eval.steps if cfg.eval.steps is not None else meta.get("steps", cfg.train.steps)
    alpha = cfg.eval.alpha if cfg.eval.alpha is not None else meta.get("alpha", cfg.train.alpha)
    freeze = cfg.train.freeze_encoder or bool(meta.get("freeze_encoder", False))
    return maml.InnerLoopConfig(int(steps), float(alpha), freeze)


def _eval_spec(cfg: RunConfig, meta: dict) -> EpisodeSpec:
    return EpisodeSpec(
        int(meta.get("n_way", cfg.train.n_way)), int(meta.get("k_shot", cfg.train.k_shot)), cfg.train.q_query
    )


def _split(cfg: RunConfig, name: str):
    return load_split(cfg.pool_path(), cfg.manifest_path(), name)


def _init_params(cfg: RunConfig, shared: bool) -> nw.ParamSet:
    spec = cfg.spec()
    if cfg.paths.pretrained:
        enc, meta = nw.load_checkpoint(cfg.paths.pretrained)
        if meta.get("kind") != "encoder":
            raise FormatError(f"{cfg.paths.pretrained}: not an encoder checkpoint", offset=12)
        return maml.attach_heads(enc.layers, spec.n_way, cfg.seed, shared=shared)
    dim = _split(cfg, "base").dim
    return nw.init_params(dim, cfg.model.layer_sizes, spec.n_way, cfg.seed, shared=shared)


# --- commands ---------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> None:
    d = cfg.data
    total = d.n_base + d.n_validation + d.n_novel
    pool = generate_synthetic_pool(total, d.dim, d.per_class, d.sigma, cfg.seed)
    splits = split_pool(pool, d.n_base, d.n_validation, d.n_novel)
    cfg.pool_path().parent.mkdir(parents=True, exist_ok=True)
    save_pool(pool, _fresh(cfg.pool_path()))
    save_manifest(splits, _fresh(cfg.manifest_path()))
    print(f"wrote {total} classes (dim {d.dim}) to {cfg.pool_path()}")


def cmd_pretrain(cfg: RunConfig) -> None:
    base = _split(cfg, "base")
    p = cfg.pretrain
    layers = maml.pretrain_encoder(base, p.epochs, p.lr, cfg.seed, cfg.model.layer_sizes, p.batch_size)
    encoder = nw.ParamSet(layers, np.zeros((1, layers[-1][0].shape[0])), shared=True)
    path = _fresh(cfg.out / "pretrained.umck")
    nw.save_checkpoint(encoder, path, {"kind": "encoder", "seed": cfg.seed, "epoch": p.epochs})
    print(f"wrote pre-trained encoder to {path}")


def cmd_train(cfg: RunConfig) -> None:
    tc = cfg.train_config()
    base = _split(cfg, "base")
    init = _init_params(cfg, shared=tc.variant == "unicorn")
    params, train_log = maml.meta_train(
        base,
        tc,
        init,
        on_epoch=lambda e: log.info("epoch %d  loss %.4f  acc %.4f", e.epoch, e.mean_query_loss, e.mean_query_acc),
    )
    meta = {
        "kind": "model",
        "variant": tc.variant,
        "seed": cfg.seed,
        "epoch": tc.epochs,
        "n_way": tc.spec.n_way,
        "k_shot": tc.spec.k_shot,
        "steps": tc.inner.steps,
        "alpha": tc.inner.alpha,
        "freeze_encoder": tc.inner.freeze_encoder,
    }
    path = _fresh(cfg.checkpoint_path())
    nw.save_checkpoint(params, path, meta)
    maml.write_train_log(train_log, _fresh(cfg.out / "train_log.csv"))
    last = train_log[-1] if train_log else None
    print(f"wrote {path}" + (f" (final epoch query acc {100 * last.mean_query_acc:.2f}%)" if last else ""))


def cmd_eval(cfg: RunConfig) -> None:
    params, meta = _load_model(cfg)
    variant = meta.get("variant", "vanilla")
    strategy = cfg.eval.strategy or ("init_support_loss" if variant == "pm" else "none")
    inner = _eval_inner(cfg, meta)
    spec = _eval_spec(cfg, meta)
    report = metatest.evaluate(
        params,
        _split(cfg, "novel"),
        spec,
        strategy,
        inner,
        cfg.eval.n_tasks,
        cfg.seed,
        threads=cfg.threads,
        fixed_order=variant == "fo",
    )
    _fresh(cfg.out / f"eval_{strategy}_report.json").write_text(report.to_json() + "\n")
    metatest.write_per_task_csv(report, _fresh(cfg.out / f"eval_{strategy}_per_task.csv"))
    metatest.results_ledger_append(report, cfg.ledger_path())
    print(report.summary())


def cmd_spread(cfg: RunConfig) -> None:
    params, meta = _load_model(cfg)
    result = analysis.permutation_spread(
        params,
        _split(cfg, "novel"),
        _eval_spec(cfg, meta),
        _eval_inner(cfg, meta),
        cfg.analysis.spread_tasks,
        cfg.seed,
        threads=cfg.threads,
    )
    analysis.write_spread(result, _fresh(cfg.out / "spread.csv"), _fresh(cfg.out / "spread.svg"))
    _write_json(cfg.out / "spread.json", {"rank_avg_acc": result.rank_avg_acc, "per_task_spread": result.per_task_spread,
                                         "histogram": {f"{k:g}": v for k, v in result.histogram().items()}})
    best, worst = result.rank_avg_acc[0], result.rank_avg_acc[-1]
    print(f"best rank {100 * best:.2f}%  worst rank {100 * worst:.2f}%  "
          f"mean per-task spread {100 * float(np.mean(result.per_task_spread)):.2f} points")


def cmd_curve(cfg: RunConfig) -> None:
    params, meta = _load_model(cfg)
    inner = _eval_inner(cfg, meta)
    curve = analysis.steps_curve(
        params,
        _split(cfg, "novel"),
        _eval_spec(cfg, meta),
        inner.alpha,
        cfg.analysis.max_steps,
        inner.freeze_encoder,
        cfg.analysis.curve_tasks,
        cfg.seed,
        threads=cfg.threads,
    )
    name = "frozen" if inner.freeze_encoder else "updated"
    analysis.write_curves({name: curve}, _fresh(cfg.out / "curve.csv"), _fresh(cfg.out / "curve.svg"),
                          "Query accuracy along the inner loop")
    print(f"step 0: {curve.acc_at_step[0]:.2f}%  step {len(curve.acc_at_step) - 1}: {curve.acc_at_step[-1]:.2f}%")


def cmd_baseline(cfg: RunConfig) -> None:
    params, meta = _load_model(cfg)
    if params.shared:
        raise HeadModeError("the randomized-head baseline needs a per-class-head model")
    inner = _eval_inner(cfg, meta)
    inner = maml.InnerLoopConfig(cfg.analysis.max_steps, inner.alpha, inner.freeze_encoder)
    learned, randomized = analysis.randomized_head_baseline(
        params, _split(cfg, "novel"), _eval_spec(cfg, meta), inner, cfg.analysis.curve_tasks, cfg.seed, cfg.threads
    )
    analysis.write_curves({"learned": learned, "randomized": randomized}, _fresh(cfg.out / "baseline.csv"),
                          _fresh(cfg.out / "baseline.svg"), "Learned vs randomized heads")
    print(f"final step: learned {learned.acc_at_step[-1]:.2f}%  randomized {randomized.acc_at_step[-1]:.2f}%")


def cmd_sweep(cfg: RunConfig) -> None:
    tc = cfg.train_config()
    init = _init_params(cfg, shared=tc.variant == "unicorn")
    result = analysis.hyper_sweep(
        _split(cfg, "base"),
        _split(cfg, "novel"),
        init,
        tc,
        cfg.analysis.sweep_alphas,
        cfg.analysis.sweep_steps,
        cfg.analysis.sweep_eval_tasks,
        cfg.seed,
    )
    analysis.write_sweep(result, _fresh(cfg.out / "sweep.csv"), _fresh(cfg.out / "sweep.svg"))
    alpha, steps = result.best
    _write_json(cfg.out / "sweep.json", {"alphas": result.alphas, "steps": result.steps, "grid": result.grid,
                                        "ci95": result.ci95, "best": {"alpha": alpha, "steps": steps}})
    print(f"best cell: alpha={alpha:g} M={steps}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "spread": cmd_spread,
    "curve": cmd_curve,
    "sweep": cmd_sweep,
    "baseline": cmd_baseline,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _echo_config(cfg, args.command)
        HANDLERS[args.command](cfg)
    except (FormatError, HeadModeError, CapacityError, FileExistsError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
