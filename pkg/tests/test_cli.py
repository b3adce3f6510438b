"""End-to-end command flows against small synthetic panels."""

import contextlib
import hashlib
import io
import json
import os

import numpy as np
import pytest

from alphamine.cli import main

RATIO_ALPHA = "Div(Mean($close,10),$close)"

SMALL_SYNTH = {
    "synth": {"num_stocks": 8, "num_days": 120, "burn_in": 40,
              "noise_to_signal": 0.5},
}

SPLITS = {"train": [0, 79], "valid": [80, 99], "test": [100, 119]}


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def sha256(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def write_config(directory, payload, name="config.json"):
    path = os.path.join(str(directory), name)
    with open(path, "w") as fh:
        json.dump(payload, fh)
    return path


def mine_config(panel_dir, **ppo_overrides):
    ppo = {"rollout_episodes": 8, "minibatch_size": 32,
           "max_env_steps": 500, "dropout": 0.0}
    ppo.update(ppo_overrides)
    return {
        "data": {"panel": os.path.join(panel_dir, "panel.csv"),
                 "target": os.path.join(panel_dir, "target.csv")},
        "splits": SPLITS,
        "pool": {"capacity": 3},
        "ppo": ppo,
    }


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    config = write_config(root, SMALL_SYNTH)
    out = str(root / "run")
    code, _, err = run_cli(["synth", "--config", config, "--out", out])
    assert code == 0, err
    return out


@pytest.fixture(scope="session")
def mine_dir(synth_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("mine")
    config = write_config(root, mine_config(synth_dir))
    out = str(root / "run")
    code, _, err = run_cli(["mine", "--config", config, "--out", out])
    assert code == 0, err
    return out


@pytest.fixture(scope="session")
def clean_dir(tmp_path_factory):
    """Panel with a noiseless single planted alpha, for exact-IC checks."""
    root = tmp_path_factory.mktemp("clean")
    config = write_config(root, {
        "synth": {"num_stocks": 10, "num_days": 120, "burn_in": 40,
                  "noise_to_signal": 0.0,
                  "planted": [{"expression": RATIO_ALPHA, "weight": 1.0}]},
    })
    out = str(root / "run")
    code, _, err = run_cli(["synth", "--config", config, "--out", out])
    assert code == 0, err
    return out


class TestSynth:
    def test_artifacts_and_manifest(self, synth_dir):
        for name in ("config_used.json", "panel.csv", "target.csv", "manifest.json"):
            assert os.path.exists(os.path.join(synth_dir, name)), name
        manifest = json.load(open(os.path.join(synth_dir, "manifest.json")))
        assert manifest["num_stocks"] == 8
        assert manifest["num_days"] == 120
        assert len(manifest["planted"]) == 2

    def test_deterministic_over_reruns(self, synth_dir, tmp_path):
        config = write_config(tmp_path, SMALL_SYNTH)
        out = str(tmp_path / "again")
        code, _, err = run_cli(["synth", "--config", config, "--out", out])
        assert code == 0, err
        for name in ("panel.csv", "target.csv", "manifest.json"):
            assert sha256(os.path.join(out, name)) == sha256(
                os.path.join(synth_dir, name)), name

    def test_seed_flag_overrides_and_changes_data(self, synth_dir, tmp_path):
        config = write_config(tmp_path, SMALL_SYNTH)
        out = str(tmp_path / "seeded")
        code, _, _ = run_cli(["synth", "--config", config, "--out", out, "--seed", "9"])
        assert code == 0
        used = json.load(open(os.path.join(out, "config_used.json")))
        assert used["seed"] == 9
        assert json.load(open(os.path.join(out, "manifest.json")))["seed"] == 9
        assert sha256(os.path.join(out, "panel.csv")) != sha256(
            os.path.join(synth_dir, "panel.csv"))

    def test_failure_cleans_partial_output(self, tmp_path):
        config = write_config(tmp_path, {
            "synth": {"num_stocks": 6, "num_days": 30, "burn_in": 5,
                      "planted": [{"expression": "Mean($close,50)", "weight": 1.0}]},
        })
        out = str(tmp_path / "broken")
        code, _, err = run_cli(["synth", "--config", config, "--out", out])
        assert code == 1
        assert "burn_in" in err
        assert os.listdir(out) == []

    def test_unparseable_planted_expression(self, tmp_path):
        config = write_config(tmp_path, {
            "synth": {"planted": [{"expression": "Bogus($close)", "weight": 1.0}]},
        })
        out = str(tmp_path / "bogus")
        code, _, err = run_cli(["synth", "--config", config, "--out", out])
        assert code == 1
        assert "Bogus" in err


class TestMine:
    def test_artifacts(self, mine_dir):
        for name in ("config_used.json", "episodes.jsonl", "training_log.jsonl",
                     "pool.json", "agent.ckpt", "mine_summary.json"):
            assert os.path.exists(os.path.join(mine_dir, name)), name
        summary = json.load(open(os.path.join(mine_dir, "mine_summary.json")))
        assert 0 < summary["env_steps"] <= 500
        assert summary["episodes"] > 0 and summary["updates"] > 0
        assert summary["pool_size"] >= 1
        assert len(summary["expressions"]) == summary["pool_size"]
        pool = json.load(open(os.path.join(mine_dir, "pool.json")))
        assert [a["expression"] for a in pool["alphas"]] == summary["expressions"]

    def test_logs_are_consistent_jsonl(self, mine_dir):
        episodes = [json.loads(l) for l in open(os.path.join(mine_dir, "episodes.jsonl"))]
        updates = [json.loads(l) for l in open(os.path.join(mine_dir, "training_log.jsonl"))]
        summary = json.load(open(os.path.join(mine_dir, "mine_summary.json")))
        assert len(episodes) == summary["episodes"]
        assert len(updates) == summary["updates"]
        assert [e["episode"] for e in episodes] == list(range(1, len(episodes) + 1))
        steps = [u["env_steps"] for u in updates]
        assert steps == sorted(steps)
        assert steps[-1] == summary["env_steps"]

    def test_deterministic_over_reruns(self, synth_dir, mine_dir, tmp_path):
        config = write_config(tmp_path, mine_config(synth_dir))
        out = str(tmp_path / "again")
        code, _, err = run_cli(["mine", "--config", config, "--out", out])
        assert code == 0, err
        for name in ("pool.json", "agent.ckpt", "episodes.jsonl",
                     "training_log.jsonl", "mine_summary.json"):
            assert sha256(os.path.join(out, name)) == sha256(
                os.path.join(mine_dir, name)), name

    def test_seed_changes_mining(self, synth_dir, mine_dir, tmp_path):
        config = write_config(tmp_path, mine_config(synth_dir))
        out = str(tmp_path / "seed2")
        code, _, _ = run_cli(["mine", "--config", config, "--out", out, "--seed", "2"])
        assert code == 0
        assert sha256(os.path.join(out, "episodes.jsonl")) != sha256(
            os.path.join(mine_dir, "episodes.jsonl"))

    def test_resume_extends_run(self, synth_dir, mine_dir, tmp_path):
        before = json.load(open(os.path.join(mine_dir, "mine_summary.json")))
        config = write_config(tmp_path, mine_config(synth_dir))
        out = str(tmp_path / "resumed")
        code, _, err = run_cli([
            "mine", "--config", config, "--out", out,
            "--resume", mine_dir, "--max-env-steps", "1100",
        ])
        assert code == 0, err
        after = json.load(open(os.path.join(out, "mine_summary.json")))
        assert after["env_steps"] > before["env_steps"]
        assert after["episodes"] > before["episodes"]
        assert after["pool_size"] >= 1

    def test_bad_splits_rejected(self, synth_dir, tmp_path):
        config = mine_config(synth_dir)
        config["splits"] = {"train": [0, 79], "valid": [60, 99], "test": [100, 119]}
        path = write_config(tmp_path, config)
        out = str(tmp_path / "badsplits")
        code, _, err = run_cli(["mine", "--config", path, "--out", out])
        assert code == 1
        assert "disjoint" in err
        assert os.listdir(out) == []


class TestEval:
    def test_mined_pool_metrics_in_range(self, synth_dir, mine_dir, tmp_path):
        config = write_config(tmp_path, mine_config(synth_dir))
        out = str(tmp_path / "eval")
        code, stdout, err = run_cli([
            "eval", "--config", config, "--out", out,
            "--pool", os.path.join(mine_dir, "pool.json"), "--split", "test",
        ])
        assert code == 0, err
        record = json.load(open(os.path.join(out, "eval.json")))
        assert record["split"] == "test"
        assert -1.0 <= record["ic"] <= 1.0
        assert -1.0 <= record["rank_ic"] <= 1.0
        assert record["num_alphas"] >= 1
        assert "IC" in stdout

    def test_planted_pool_scores_perfectly(self, clean_dir, tmp_path):
        pool_path = str(tmp_path / "pool.json")
        with open(pool_path, "w") as fh:
            json.dump({"version": 1, "capacity": 1, "objective": 0.0,
                       "alphas": [{"expression": RATIO_ALPHA, "weight": 1.0}]}, fh)
        config = write_config(tmp_path, {
            "data": {"panel": os.path.join(clean_dir, "panel.csv"),
                     "target": os.path.join(clean_dir, "target.csv")},
            "splits": SPLITS,
        })
        out = str(tmp_path / "eval")
        code, _, err = run_cli(["eval", "--config", config, "--out", out,
                                "--pool", pool_path, "--split", "test"])
        assert code == 0, err
        record = json.load(open(os.path.join(out, "eval.json")))
        assert record["ic"] == pytest.approx(1.0, abs=1e-9)
        assert record["rank_ic"] == pytest.approx(1.0, abs=1e-9)

    def test_empty_pool_rejected(self, clean_dir, tmp_path):
        pool_path = str(tmp_path / "pool.json")
        with open(pool_path, "w") as fh:
            json.dump({"version": 1, "capacity": 1, "objective": 0.0, "alphas": []}, fh)
        config = write_config(tmp_path, {
            "data": {"panel": os.path.join(clean_dir, "panel.csv"),
                     "target": os.path.join(clean_dir, "target.csv")},
            "splits": SPLITS,
        })
        out = str(tmp_path / "eval")
        code, _, err = run_cli(["eval", "--config", config, "--out", out,
                                "--pool", pool_path])
        assert code == 1
        assert "empty" in err.lower()

    def test_bad_expression_named_in_error(self, clean_dir, tmp_path):
        pool_path = str(tmp_path / "pool.json")
        with open(pool_path, "w") as fh:
            json.dump({"version": 1, "capacity": 2, "objective": 0.0,
                       "alphas": [{"expression": "Nope($close)", "weight": 1.0}]}, fh)
        config = write_config(tmp_path, {
            "data": {"panel": os.path.join(clean_dir, "panel.csv"),
                     "target": os.path.join(clean_dir, "target.csv")},
            "splits": SPLITS,
        })
        out = str(tmp_path / "eval")
        code, _, err = run_cli(["eval", "--config", config, "--out", out,
                                "--pool", pool_path])
        assert code == 1
        assert "Nope" in err and "not evaluable" in err

    def test_missing_pool_flag(self, clean_dir, tmp_path):
        config = write_config(tmp_path, {
            "data": {"panel": os.path.join(clean_dir, "panel.csv"),
                     "target": os.path.join(clean_dir, "target.csv")},
            "splits": SPLITS,
        })
        out = str(tmp_path / "eval")
        code, _, err = run_cli(["eval", "--config", config, "--out", out])
        assert code == 1
        assert "--pool" in err


class TestBacktest:
    def test_series_covers_split(self, synth_dir, mine_dir, tmp_path):
        config = write_config(tmp_path, mine_config(synth_dir))
        out = str(tmp_path / "bt")
        code, _, err = run_cli([
            "backtest", "--config", config, "--out", out,
            "--pool", os.path.join(mine_dir, "pool.json"), "--split", "test",
            "--top-k", "3", "--drop-n", "1",
        ])
        assert code == 0, err
        lines = open(os.path.join(out, "backtest.csv")).read().splitlines()
        assert lines[0] == "date,net_worth,turnover"
        assert len(lines) == 1 + 20  # test split has 20 days
        summary = json.load(open(os.path.join(out, "backtest_summary.json")))
        assert summary["days"] == 20
        assert summary["split"] == "test"
        assert summary["final_worth"] > 0.0
        used = json.load(open(os.path.join(out, "config_used.json")))
        assert used["backtest"]["top_k"] == 3
        assert used["backtest"]["drop_n"] == 1

    def test_oversized_top_k_fails(self, synth_dir, mine_dir, tmp_path):
        config = write_config(tmp_path, mine_config(synth_dir))
        out = str(tmp_path / "bt")
        code, _, err = run_cli([
            "backtest", "--config", config, "--out", out,
            "--pool", os.path.join(mine_dir, "pool.json"),
            "--top-k", "50", "--drop-n", "5",
        ])
        assert code == 1
        assert "universe" in err
        assert os.listdir(out) == []


class TestReport:
    def test_objective_series(self, mine_dir, tmp_path):
        out = str(tmp_path / "rep")
        code, _, err = run_cli([
            "report", "--out", out,
            "--training-log", os.path.join(mine_dir, "training_log.jsonl"),
        ])
        assert code == 0, err
        lines = open(os.path.join(out, "report_objective.csv")).read().splitlines()
        assert lines[0] == "env_steps,update,pool_objective,mean_reward"
        updates = [json.loads(l) for l in open(os.path.join(mine_dir, "training_log.jsonl"))]
        assert len(lines) == 1 + len(updates)
        first = lines[1].split(",")
        assert int(first[0]) == updates[0]["env_steps"]
        assert float(first[2]) == updates[0]["pool_objective"]

    def test_net_worth_series(self, synth_dir, mine_dir, tmp_path):
        config = write_config(tmp_path, mine_config(synth_dir))
        bt_out = str(tmp_path / "bt")
        code, _, _ = run_cli([
            "backtest", "--config", config, "--out", bt_out,
            "--pool", os.path.join(mine_dir, "pool.json"), "--split", "test",
            "--top-k", "3", "--drop-n", "1",
        ])
        assert code == 0
        out = str(tmp_path / "rep")
        code, _, err = run_cli([
            "report", "--out", out,
            "--backtest-csv", os.path.join(bt_out, "backtest.csv"),
        ])
        assert code == 0, err
        lines = open(os.path.join(out, "report_net_worth.csv")).read().splitlines()
        assert lines[0] == "date,net_worth"
        assert len(lines) == 1 + 20

    def test_no_inputs_rejected(self, tmp_path):
        out = str(tmp_path / "rep")
        code, _, err = run_cli(["report", "--out", out])
        assert code == 1
        assert "--training-log" in err
