import csv

import pytest

from antimatthew.cli import budgets_from_report, main, one_sig_fig, read_key_values

FAST = ["--n", "1000", "--rounds", "4,4,4"]
BUDGET_FLAGS = ["--eps-b", "0.1", "--eps-vl", "0.01", "--eps-vb", "0.04"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_deterministic(tmp_path):
    assert main(["generate", "--n", "500", "--seed", "0", "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", "--n", "500", "--seed", "0", "--out", str(tmp_path / "b")]) == 0
    for name in ("train.csv", "test.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["test.csv", "train.csv"]


def test_generate_rejects_zero_samples(tmp_path):
    assert main(["generate", "--n", "0", "--out", str(tmp_path)]) == 2


def test_output_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("ANTIMATTHEW_OUT", str(tmp_path))
    assert main(["generate", "--n", "200"]) == 0
    assert (tmp_path / "data" / "train.csv").exists()


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "run"
    assert main(["train", *FAST, *BUDGET_FLAGS, "--out", str(out)]) == 0
    return out


def test_train_outputs(train_dir):
    r = rows(train_dir / "rounds.csv")
    assert len(r) == 12 and r[-1]["round"] == "12"
    assert {"loss_0", "acc_1", "bias_1", "marker"} <= set(r[0])
    kv = read_key_values(train_dir / "final_report.csv")
    assert {"avg_acc", "std_acc", "avg_bias", "status_bias"} <= set(kv)
    for name in ("model.ckpt", "model_stage1.ckpt", "model_stage2.ckpt", "config.txt",
                 "accuracy.svg", "bias.svg", "loss.svg"):
        assert (train_dir / name).exists(), name
    assert (train_dir / "bias.svg").read_text().lstrip().startswith("<?xml")


def test_log_every_thins_rounds_csv(tmp_path):
    assert main(["train", *FAST, "--method", "fedavg", "--log-every", "5", "--no-figures",
                 "--out", str(tmp_path)]) == 0
    assert [r["round"] for r in rows(tmp_path / "rounds.csv")] == ["5", "10", "12"]


def test_config_echo_reproduces(train_dir, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--config", str(train_dir / "config.txt"), "--out", str(out)]) == 0
    assert (out / "model.ckpt").read_bytes() == (train_dir / "model.ckpt").read_bytes()
    assert (out / "rounds.csv").read_bytes() == (train_dir / "rounds.csv").read_bytes()


def test_evaluate_checkpoint(train_dir, tmp_path, capsys):
    code = main(["evaluate", "--checkpoint", str(train_dir / "model.ckpt"), "--n", "1000",
                 "--out", str(tmp_path)])
    assert code == 0
    ev = read_key_values(tmp_path / "evaluation.csv")
    fin = read_key_values(train_dir / "final_report.csv")
    assert float(ev["avg_acc"]) == pytest.approx(float(fin["avg_acc"]), abs=1e-12)


def test_evaluate_missing_checkpoint(tmp_path):
    assert main(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt")]) == 2


def test_train_without_budgets(tmp_path):
    assert main(["train", *FAST, "--out", str(tmp_path)]) == 2


def test_unknown_set_key(tmp_path):
    assert main(["train", *FAST, "--set", "plan.bogus=1", "--out", str(tmp_path)]) == 2


def test_repeat_writes_runs_and_summary(tmp_path):
    out = tmp_path / "rep"
    assert main(["train", *FAST, "--method", "fedavg", "--repeat", "3", "--no-figures",
                 "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("run_*")) == ["run_000", "run_001", "run_002"]
    summary = {r["metric"]: r for r in rows(out / "summary.csv")}
    assert summary["avg_acc"]["n"] == "3"


def test_one_sig_fig():
    assert one_sig_fig(0.124) == 0.1 and one_sig_fig(0.01415) == 0.01
    assert budgets_from_report(0.2480, 0.0283, 0.0819) == (0.1, 0.01, 0.04)
    assert budgets_from_report(0.02, 0.02, 0.02) == (0.01, 0.01, 0.01)


def test_budget_from_fedavg(tmp_path, capsys):
    run = tmp_path / "fedavg"
    assert main(["train", *FAST, "--method", "fedavg", "--no-figures", "--out", str(run)]) == 0
    capsys.readouterr()
    frag = tmp_path / "budgets.txt"
    assert main(["budget-from-fedavg", "--run", str(run), "--write", str(frag)]) == 0
    printed = capsys.readouterr().out
    assert printed == frag.read_text() and printed.count("budgets.eps_") == 3
    # the fragment feeds straight back into a config
    assert main(["train", *FAST, "--config", str(frag), "--no-figures",
                 "--out", str(tmp_path / "am")]) == 0


def test_budget_from_fedavg_zero_warns(tmp_path, caplog):
    run = tmp_path / "flat"
    run.mkdir()
    (run / "final_report.csv").write_text("key,value\navg_bias,0\nstd_acc,0\nstd_bias,0\n")
    assert main(["budget-from-fedavg", "--run", str(run)]) == 0
    assert "zero" in caplog.text


def test_budget_from_missing_run(tmp_path):
    assert main(["budget-from-fedavg", "--run", str(tmp_path / "nope")]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["budget-from-fedavg", "--run", str(tmp_path / "empty")]) == 2


def test_sweep_single_value_deterministic(tmp_path):
    args = ["sweep", *FAST, *BUDGET_FLAGS, "--parameter", "eps_b", "--values", "0.1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b"), "--no-figures"]) == 0
    a, b = rows(tmp_path / "a" / "sweep.csv"), rows(tmp_path / "b" / "sweep.csv")
    assert len(a) == 1 and a == b
    assert (tmp_path / "a" / "sweep.svg").exists()


def test_ablation_deterministic(tmp_path):
    args = ["ablation", *FAST, *BUDGET_FLAGS]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = rows(tmp_path / "a" / "ablation.csv")
    assert [r["variant"] for r in a] == ["stage1", "stage2", "stage3", "full"]
    assert a == rows(tmp_path / "b" / "ablation.csv")
    assert all(r["check_std_acc"] in ("satisfied", "near", "violated") for r in a)


def test_attack_all_malicious_rejected(tmp_path):
    assert main(["attack", *FAST, *BUDGET_FLAGS, "--attack-count", "2",
                 "--out", str(tmp_path)]) == 2


def test_attack_needs_malicious(tmp_path):
    assert main(["attack", *FAST, *BUDGET_FLAGS, "--out", str(tmp_path)]) == 2


def test_attack_none_matches_train(tmp_path):
    out = tmp_path / "atk"
    assert main(["attack", *FAST, *BUDGET_FLAGS, "--malicious", "1", "--methods", "fedavg",
                 "--kinds", "none,zero", "--out", str(out)]) == 0
    assert main(["train", *FAST, "--method", "fedavg", "--no-figures",
                 "--out", str(tmp_path / "plain")]) == 0
    assert ((out / "fedavg_none" / "model.ckpt").read_bytes()
            == (tmp_path / "plain" / "model.ckpt").read_bytes())
    r = rows(out / "attack.csv")
    assert [x["attack"] for x in r] == ["none", "zero"] and r[0]["malicious"] == "1"


def test_attack_bad_kind(tmp_path):
    assert main(["attack", *FAST, *BUDGET_FLAGS, "--malicious", "1", "--kinds", "flip",
                 "--out", str(tmp_path)]) == 2


def test_dump_lp(tmp_path):
    out = tmp_path / "lp"
    assert main(["train", *FAST, *BUDGET_FLAGS, "--dump-lp", "--no-figures",
                 "--out", str(out)]) == 0
    assert (out / "lp_dump.txt").read_text().strip()
