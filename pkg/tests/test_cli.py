import csv
import json
import os

import numpy as np
import pytest

from isingreg import cli
from isingreg import uncertainty as unc
from isingreg.data import write_idx

TINY = ["--epochs", "2", "--warmup-epochs", "1", "--batch-size", "16", "--mc-samples", "3",
        "--eval-size", "12"]
TINY_MODEL = {"dim": 8, "depth": 1, "heads": 2, "mlp_ratio": 2, "patch": 7}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    d = root / "mnist"
    d.mkdir()
    rng = np.random.default_rng(0)
    for split, n in (("train", 48), ("t10k", 20)):
        labels = np.arange(n) % 10
        imgs = rng.integers(0, 40, (n, 28, 28)).astype(np.uint8)
        imgs[np.arange(n), labels * 2, :] = 255  # a bright row that encodes the label
        write_idx(d / f"{split}-images-idx3-ubyte", d / f"{split}-labels-idx1-ubyte", imgs, labels)
    return str(root)


def config_file(tmp_path, **extra):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"model": TINY_MODEL, **extra}))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- parsing -----------------------------------------------------------------------------------

def test_one_cell_plan():
    plan = cli.parse_config("--dataset mnist --method ising --train-size 300 --delta 0.1 --seed 1".split(), {})
    assert list(plan.cells()) == [{"train_size": 300, "method": "ising", "delta": 0.1, "seed": 1}]


def test_flag_beats_config_file(tmp_path):
    cfg = config_file(tmp_path, train={"epochs": 30, "lr": 0.01})
    plan = cli.parse_config(["--config", cfg, "--epochs", "5"], {})
    assert plan.train["epochs"] == 5 and plan.train["lr"] == 0.01
    assert plan.train_config("ising", 0.1, 1).epochs == 5


def test_preset_below_config_and_flags(tmp_path):
    plan = cli.parse_config(["--preset", "paper-small"], {})
    assert plan.seeds == [1, 2, 3, 4, 5] and plan.train_sizes == [300, 6000]
    assert plan.methods == ["dropconnect", "dropout", "ising"] and plan.deltas == [0.1, 0.5]
    cfg = config_file(tmp_path, seeds=[7])
    plan = cli.parse_config(["--preset", "paper-small", "--config", cfg, "--delta", "0.1"], {})
    assert plan.seeds == [7] and plan.deltas == [0.1]
    full = cli.parse_config(["--preset", "paper-full", "--dataset", "cifar100"], {})
    assert full.train_sizes == [250, 15000, 40000] and len(full.seeds) == 10


@pytest.mark.parametrize("argv", [
    ["--delta", "1.5"], ["--delta", "0"], ["--method", "bayes"], ["--seed", "1", "--seeds", "2", "3"],
    ["--train-size", "0"], ["--epochs", "2", "--warmup-epochs", "3"], ["--bogus"],
])
def test_usage_errors(argv):
    with pytest.raises(cli.UsageError):
        cli.parse_config(argv, {})


def test_unknown_config_keys(tmp_path):
    with pytest.raises(cli.UsageError, match="epochz"):
        cli.parse_config(["--config", config_file(tmp_path, epochz=3)], {})
    with pytest.raises(cli.UsageError):
        cli.parse_config(["--config", config_file(tmp_path, train={"epochz": 3})], {})
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(cli.UsageError):
        cli.parse_config(["--config", str(bad)], {})


def test_main_exit_code_on_usage_error(capsys):
    assert cli.main(["--delta", "1.5"]) == 1
    assert "delta" in capsys.readouterr().err


def test_data_dir_env_fallback():
    assert cli.parse_config([], {"ISINGREG_DATA_DIR": "/x"}).data_dir == "/x"
    assert cli.parse_config(["--data-dir", "/y"], {"ISINGREG_DATA_DIR": "/x"}).data_dir == "/y"


def test_kl_flag():
    assert cli.parse_config(["--kl-weights", "off"], {}).train["kl_weights"] is False
    assert cli.parse_config(["--kl-weights", "on"], {}).train["kl_weights"] is True


def test_plan_json_round_trip(tmp_path):
    plan = cli.parse_config(["--config", config_file(tmp_path), "--seeds", "3", "4", "--lr", "0.002",
                             "--out", str(tmp_path / "o")], {})
    p = tmp_path / "plan.json"
    p.write_text(plan.to_json())
    again = cli.parse_config(["--config", str(p)], {})
    assert again == plan


def test_cells_follow_table_order():
    plan = cli.ExperimentPlan(methods=["ising", "dropconnect", "dropout"], train_sizes=[300, 6000],
                              seeds=[1, 2])
    cells = list(plan.cells())
    assert len(cells) == 12
    assert [c["method"] for c in cells[:6]] == ["dropconnect"] * 2 + ["dropout"] * 2 + ["ising"] * 2
    assert all(c["train_size"] == 300 for c in cells[:6])


# --- summary -----------------------------------------------------------------------------------

def _fake_rows(sizes=(300, 6000, 18000), seeds=range(1, 11)):
    rng = np.random.default_rng(0)
    rows = []
    for n in sizes:
        for m in cli.METHOD_ORDER:
            for s in seeds:
                r = {"dataset": "mnist", "train_size": n, "method": m, "delta": 0.1, "seed": s}
                r.update({k: float(rng.random()) for k in unc.METRIC_NAMES})
                rows.append(r)
    return rows


def test_summary_has_table_layout():
    srows = cli.summary_rows(_fake_rows())
    assert len(srows) == 9
    assert [(r["train_size"], r["method"]) for r in srows[:3]] == [
        (300, "dropconnect"), (300, "dropout"), (300, "ising")]
    assert all(r["n_seeds"] == 10 for r in srows)
    cell = srows[0]["accuracy_cell"]
    assert cell == f"{srows[0]['accuracy_mean']:.3f} ({srows[0]['accuracy_sd']:.3f})"


def test_summary_matches_recomputation():
    rows = _fake_rows()
    text = cli.summary_csv(rows)
    parsed = list(csv.DictReader(text.splitlines()))
    for r in parsed:
        vals = [x["f1"] for x in rows if x["train_size"] == int(r["train_size"]) and x["method"] == r["method"]]
        assert abs(float(r["f1_mean"]) - np.mean(vals)) <= 1e-12
        assert abs(float(r["f1_sd"]) - np.std(vals, ddof=1)) <= 1e-12


# --- running -----------------------------------------------------------------------------------

ARTIFACTS = ("metrics.csv", "entropy.csv", "calibration.csv", "intervals.csv", "checkpoint.bin", "train_log.csv")


def _run(tmp_path, data_dir, out, extra=()):
    argv = ["--config", config_file(tmp_path), "--data-dir", data_dir, "--out", str(out),
            "--train-size", "32", "--delta", "0.1", *TINY, *extra]
    return cli.main(argv)


def test_one_cell_run_and_byte_identical_rerun(tmp_path, data_dir):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(tmp_path, data_dir, a, ["--seed", "1"]) == 0
    assert _run(tmp_path, data_dir, b, ["--seed", "1"]) == 0
    rows = read_csv(a / "metrics.csv")
    assert len(rows) == 1 and rows[0]["method"] == "ising"
    cell = os.path.join("mnist", "ising", "n32", "delta0.1", "seed1")
    for name in ARTIFACTS:
        assert (a / cell / name).read_bytes() == (b / cell / name).read_bytes(), name
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    ent = read_csv(a / cell / "entropy.csv")
    assert len(ent) == 12
    cal = read_csv(a / cell / "calibration.csv")
    assert sum(int(r["count"]) for r in cal) == 12
    plan = json.loads((a / "plan.json").read_text())
    assert plan["seeds"] == [1] and plan["eval_size"] == 12


def test_failing_cell_is_isolated(tmp_path, data_dir):
    out = tmp_path / "o"
    # 100 training examples do not exist in the 48-example fixture
    code = cli.main(["--config", config_file(tmp_path), "--data-dir", data_dir, "--out", str(out),
                     "--train-size", "32", "100", "--method", "dropconnect", "--seed", "2", *TINY])
    assert code == 2
    assert len(read_csv(out / "metrics.csv")) == 1
    fails = read_csv(out / "failures.csv")
    assert len(fails) == 1 and fails[0]["train_size"] == "100"


def test_missing_data_dir_fails_cells(tmp_path, monkeypatch):
    monkeypatch.delenv("ISINGREG_DATA_DIR", raising=False)
    out = tmp_path / "o"
    code = cli.main(["--config", config_file(tmp_path), "--out", str(out), "--train-size", "8", *TINY])
    assert code == 2
    assert "data" in read_csv(out / "failures.csv")[0]["error"]
