import json
import os
import subprocess
import sys

import pytest

from copycat import cli


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture(scope="module")
def wd(tmp_path_factory):
    """A tiny end-to-end workdir: data, target, stolen labels, fake dataset, copycat."""
    root = tmp_path_factory.mktemp("wd")
    steps = [
        ["prepare-data", "--npdd-count", 2000, "--random-count", 50],
        ["train-target", "--epochs", 10, "--step-epochs", 4, "--test", "data/tdd.jsonl"],
        ["steal", "--oracle-checkpoint", "checkpoints/target.ckpt"],
        ["balance"],
        ["train-copycat", "--epochs", 1],
    ]
    for step in steps:
        assert cli.main(["--seed", "3", "--workdir", str(root)] + [str(a) for a in step]) == 0, step
    return root


def test_cost_desk_example(capsys, tmp_path):
    code, out, _ = run(capsys, "--workdir", tmp_path, "cost", "--labeling", 1900, "--queries", 1_000_000)
    assert code == 0
    assert out["minimum_batch_price"] == "$1.90"
    assert out["attack_cost_display"] == "$1,000.00" and out["viable"] is True
    saved = json.loads((tmp_path / "reports" / "cost.json").read_text())
    assert saved == out
    assert (tmp_path / "reports" / "cost.json.meta.json").exists()


def test_cost_table_export(capsys, tmp_path):
    code, out, _ = run(capsys, "--workdir", tmp_path, "cost", "--table")
    assert code == 0
    assert [r["minimum_batch_price"] for r in out["table"]] == \
        ["$90.15", "$20.00", "$3.80", "$15.75", "$1.68", "$3.36", "$11.20"]
    assert (tmp_path / "reports" / "cost.table.csv").read_text().count("\n") == 8


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2


def test_seed_is_mandatory(capsys, wd):
    code, _, err = run(capsys, "--workdir", wd, "steal", "--oracle-checkpoint", "checkpoints/target.ckpt")
    assert code == 1 and "seed" in json.loads(err)["message"]


def test_missing_input_is_json_error(capsys, tmp_path):
    code, _, err = run(capsys, "--seed", 1, "--workdir", tmp_path, "balance", "--stolen", "nope.jsonl")
    assert code == 1
    body = json.loads(err)
    assert body["error"] == "validation_error" and "nope.jsonl" in body["message"]


def test_errors_carry_codes(capsys, wd):
    code, _, err = run(capsys, "--seed", 1, "--workdir", wd, "steal", "--oracle-checkpoint",
                       "checkpoints/target.ckpt", "--budget", 10, "--count", 20, "--out", "x.jsonl")
    assert code == 1 and json.loads(err)["error"] == "budget_exceeded"


def test_steal_zero(capsys, wd):
    code, out, _ = run(capsys, "--seed", 1, "--workdir", wd, "steal", "--oracle-checkpoint",
                       "checkpoints/target.ckpt", "--count", 0, "--out", "empty.jsonl")
    assert code == 0 and out["stolen"] == 0 and out["budget_used"] == 0
    assert (wd / "empty.jsonl").read_text() == ""


def test_eval_self_copy_is_100(capsys, wd):
    code, out, _ = run(capsys, "--workdir", wd, "eval", "--checkpoint", "checkpoints/target.ckpt",
                       "--target-checkpoint", "checkpoints/target.ckpt", "--out", "reports/self.json")
    assert code == 0 and out["perf_over_target"] == 100.0
    assert (wd / "reports" / "self.confusion.csv").exists()


def test_eval_copycat(capsys, wd):
    code, out, _ = run(capsys, "--workdir", wd, "eval", "--target-checkpoint", "checkpoints/target.ckpt",
                       "--stolen", "stolen_labels.jsonl")
    assert code == 0 and 0 <= out["copycat_accuracy"] <= 1
    report = json.loads((wd / "reports" / "eval.json").read_text())
    assert len(report["confusion"]) == 10 and report["normalized_entropy"] is not None


def test_attack_side_rejects_odd(capsys, wd):
    for argv in (["steal", "--oracle-checkpoint", "checkpoints/target.ckpt", "--pool", "data/odd.jsonl"],
                 ["train-copycat", "--data", "data/odd.jsonl"],
                 ["eval", "--test", "data/odd.jsonl", "--target-accuracy", "0.9"]):
        code, _, err = run(capsys, "--seed", 1, "--workdir", wd, *argv)
        assert code == 1 and "ODD" in json.loads(err)["message"], argv


def test_config_precedence(capsys, wd, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "price": "7", "cost": {"price": "2"}}))
    args = cli.resolve(["--config", str(cfg), "--workdir", str(wd), "cost", "--labeling", "1"])
    assert args.price == "2" and args.seed == 5
    args = cli.resolve(["--config", str(cfg), "--workdir", str(wd), "cost", "--price", "3"])
    assert args.price == "3"
    args = cli.resolve(["--config", str(cfg), "--seed", "9", "--workdir", str(wd), "cost"])
    assert args.seed == 9
    cfg.write_text(json.dumps({"price": "7"}))
    assert cli.resolve(["--config", str(cfg), "cost"]).price == "7"


def test_workdir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("COPYCAT_WORKDIR", str(tmp_path))
    args = cli.resolve(["cost"])
    assert args.workdir == str(tmp_path)
    assert cli._path(args, "reports/x.json") == str(tmp_path / "reports" / "x.json")


def test_curve_outputs_and_figures(capsys, wd):
    argv = ["--seed", 2, "--workdir", wd, "curve", "--oracle-checkpoint", "checkpoints/target.ckpt",
            "--sizes", 1000, 2000, "--epochs", 1]
    code, out, _ = run(capsys, *argv)
    assert code == 0 and [p["size"] for p in out["curve"]] == [0, 1000, 2000] and out["budget_used"] == 2000
    d = wd / "runs" / "curve"
    for name in ("data_curve.svg", "data_curve.csv", "label_distribution.svg", "label_distribution.csv"):
        assert (d / "figures" / name).stat().st_size > 0
    first = {p: (d / p).read_bytes() for p in ("curve.json", "figures/data_curve.svg", "checkpoints/2000.ckpt")}
    assert run(capsys, *argv)[0] == 0
    assert first == {p: (d / p).read_bytes() for p in first}


def test_lrp_and_features(capsys, wd):
    code, out, _ = run(capsys, "--seed", 4, "--workdir", wd, "lrp", "--count", 3)
    assert code == 0 and out["pairs"] == 3
    pngs = [f for f in os.listdir(wd / "reports" / "lrp") if f.endswith(".png")]
    assert len(pngs) == 6
    code, out, _ = run(capsys, "--seed", 4, "--workdir", wd, "features", "--per-class", 1, "--neighbors", 1)
    assert code == 0 and out["rows"] == out["odd"] + out["npdd"] == 20
    assert (wd / "reports" / "features.pca.png").exists()
    meta = json.loads((wd / "reports" / "features.jsonl.meta.json").read_text())
    assert meta["metric"] == "euclidean" and meta["pool_size"] == 2000


def test_robustness_fixed_target(capsys, wd):
    code, out, _ = run(capsys, "--seed", 6, "--workdir", wd, "robustness", "--oracle-checkpoint",
                       "checkpoints/target.ckpt", "--count", 2000, "--repeats", 2, "--epochs", 1)
    assert code == 0
    saved = json.loads((wd / "reports" / "robustness.json").read_text())
    assert len(saved["runs"]) == 2 and saved["per_seed_target"] is False and saved["std"] == out["std"]


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "copycat.cli", "--workdir", str(tmp_path), "cost",
                           "--labeling", "840", "--queries", "500000"], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["minimum_batch_price"] == "$1.68"
