import csv
import json

import pytest

from unimaml.cli import main
from unimaml.metatest import EvalReport

SMALL = {
    "data": {"n_base": 12, "n_validation": 2, "n_novel": 6, "dim": 6, "per_class": 20},
    "model": {"layer_sizes": [16]},
    "pretrain": {"epochs": 2},
    "train": {"epochs": 2, "tasks_per_epoch": 10, "q_query": 4, "steps": 2},
    "analysis": {"max_steps": 3, "sweep_alphas": [0.05], "sweep_steps": [1, 2], "sweep_eval_tasks": 5},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "small.json"
    config.write_text(json.dumps(SMALL))
    common = ["--config", str(config), "--seed", "4", "--threads", "1"]
    assert main(["gen-data", "--out", str(root / "data"), *common]) == 0
    pool = ["--pool", str(root / "data" / "pool.fscp")]
    assert main(["pretrain", "--out", str(root / "data"), *common, *pool]) == 0
    init = ["--init", str(root / "data" / "pretrained.umck")]
    for variant in ("vanilla", "unicorn"):
        assert main(["train", "--out", str(root / variant), "--variant", variant, *common, *pool, *init]) == 0
    return root, common, pool


def run(workdir, command, model, out, *extra):
    root, common, pool = workdir
    return main([command, "--out", str(root / out), "--checkpoint", str(root / model / "model.umck"), *common, *pool, *extra])


def test_pipeline_outputs(workdir):
    root, _, _ = workdir
    assert (root / "data" / "pool.splits.json").exists()
    assert (root / "data" / "gen-data.config.json").exists()
    for variant in ("vanilla", "unicorn"):
        assert (root / variant / "model.umck").exists()
        rows = list(csv.DictReader(open(root / variant / "train_log.csv")))
        assert [r["epoch"] for r in rows] == ["0", "1"]


def test_eval_report_and_ledger(workdir):
    root, _, _ = workdir
    assert run(workdir, "eval", "vanilla", "ev", "--tasks", "40", "--strategy", "ens-rot") == 0
    report = EvalReport.from_json((root / "ev" / "eval_ensemble_rotated_report.json").read_text())
    accs = [float(r["query_acc"]) for r in csv.DictReader(open(root / "ev" / "eval_ensemble_rotated_per_task.csv"))]
    assert report.task_count == 40 and report.steps == 2
    assert EvalReport.from_accuracies(accs).ci95 == pytest.approx(report.ci95, abs=1e-12)
    assert run(workdir, "eval", "vanilla", "ev", "--tasks", "10") == 0
    ledger = list(csv.DictReader(open(root / "ev" / "results.csv")))
    assert [r["strategy"] for r in ledger] == ["ensemble_rotated", "none"]
    assert (root / "ev" / "eval.2.config.json").exists()


def test_retraining_is_bit_identical(workdir):
    root, common, pool = workdir
    init = ["--init", str(root / "data" / "pretrained.umck")]
    assert main(["train", "--out", str(root / "again"), "--variant", "unicorn", *common, *pool, *init]) == 0
    assert (root / "again" / "model.umck").read_bytes() == (root / "unicorn" / "model.umck").read_bytes()


def test_unicorn_spread_is_a_single_bin(workdir):
    root, _, _ = workdir
    assert run(workdir, "spread", "unicorn", "sp", "--tasks", "5") == 0
    spread = json.loads((root / "sp" / "spread.json").read_text())
    assert len(spread["histogram"]) == 1
    assert max(spread["per_task_spread"]) == 0.0
    assert (root / "sp" / "spread.svg").exists()


def test_curve_baseline_and_sweep(workdir):
    root, common, pool = workdir
    assert run(workdir, "curve", "vanilla", "cu", "--tasks", "10") == 0
    assert len(list(csv.reader(open(root / "cu" / "curve.csv")))) == 1 + 4
    assert run(workdir, "baseline", "vanilla", "ba", "--tasks", "10") == 0
    assert list(csv.reader(open(root / "ba" / "baseline.csv")))[0][1] == "learned_acc"
    assert run(workdir, "baseline", "unicorn", "ba2", "--tasks", "5") == 2
    init = ["--init", str(root / "data" / "pretrained.umck")]
    assert main(["sweep", "--out", str(root / "sw"), *common, *pool, *init]) == 0
    sweep = json.loads((root / "sw" / "sweep.json").read_text())
    assert len(sweep["grid"]) == 1 and len(sweep["grid"][0]) == 2


def test_outputs_are_write_once(workdir, capsys):
    assert run(workdir, "curve", "vanilla", "once", "--tasks", "3") == 0
    assert run(workdir, "curve", "vanilla", "once", "--tasks", "3") == 2
    assert "refusing to overwrite" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--bogus"],
        ["frobnicate", "--seed", "1"],
        ["train"],
        ["train", "--seed", "1", "--threads", "0"],
        ["eval", "--seed", "1", "--strategy", "vote"],
        ["train", "--seed", "-3"],
    ],
)
def test_usage_errors_exit_1(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)] if argv[0] != "frobnicate" else argv) == 1


def test_unknown_config_key_exits_1(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"stepz": 3}}))
    assert main(["train", "--config", str(cfg), "--seed", "1"]) == 1


def test_malformed_checkpoint_exits_2_with_offset(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.umck"
    bad.write_bytes(b"NOPE" + bytes(20))
    _, common, pool = workdir
    code = main(["eval", "--out", str(tmp_path / "o"), "--checkpoint", str(bad), *common, *pool])
    assert code == 2
    assert "offset 0" in capsys.readouterr().err


def test_missing_pool_exits_2(tmp_path):
    assert main(["train", "--seed", "1", "--out", str(tmp_path), "--threads", "1"]) == 2


def test_encoder_checkpoint_is_not_a_model(workdir, tmp_path):
    root, common, pool = workdir
    code = main(["eval", "--out", str(tmp_path), "--checkpoint", str(root / "data" / "pretrained.umck"), *common, *pool])
    assert code == 2
