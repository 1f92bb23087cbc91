import csv
import io
import json

import pytest

from vrdp import checkpoint
from vrdp.cli import main
from vrdp.config import RunConfig
from vrdp.provenance import build_id

TINY = {
    "net": {"down_dims": [8, 16, 32], "n_groups": 4, "time_embed_dim": 16, "cond_dim": 16, "encoder_hidden": 16},
    "train": {"epochs": 4, "eval_every": 2, "eval_rollouts": 2, "warmup_steps": 2},
    "env": {"n_demos": 2},
    "eval": {"n_rollouts": 3},
    "masklab": {"grid": [0.0, 1.0], "n_seeds": 2, "n_rollouts": 2},
}


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(cfg_path, out, *args):
    return main([args[0], "--config", cfg_path, "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def trained(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(cfg_path, out, "gen-demos") == 0
    assert run(cfg_path, out, "train") == 0
    return out


def test_gen_demos_is_byte_identical(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path / "a", "gen-demos") == 0
    assert run(cfg_path, tmp_path / "b", "gen-demos") == 0
    assert (tmp_path / "a/demos.rec").read_bytes() == (tmp_path / "b/demos.rec").read_bytes()


def test_gen_demos_rejects_zero_demos(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"env": {"n_demos": 0}}))
    assert main(["gen-demos", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "n_demos" in capsys.readouterr().err


def test_unknown_config_key_is_an_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochz": 3}}))
    assert main(["gen-demos", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_train_needs_a_dataset(cfg_path, tmp_path, capsys):
    assert run(cfg_path, tmp_path, "train") == 2
    assert "gen-demos" in capsys.readouterr().err


def test_metrics_rows_match_epochs_and_carry_stamp(trained, cfg_path):
    rows = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3, 4]
    h = RunConfig.load(cfg_path).config_hash()
    assert all(r["config_hash"] == h and r["seed"] == 0 and r["build_id"] == build_id() for r in rows)
    assert sum("eval_success_rate" in r for r in rows) == 2


def test_checkpoints_written(trained):
    last = checkpoint.load(trained / "last.ckpt")
    best = checkpoint.load(trained / "best.ckpt")
    assert last.epoch == 4
    assert best.epoch in (2, 4)
    assert [e for e, _ in last.eval_history] == [2, 4]


def test_split_run_is_byte_identical(trained, cfg_path, tmp_path):
    out = tmp_path / "split"
    assert run(cfg_path, out, "gen-demos") == 0
    assert run(cfg_path, out, "train", "--stop-after", "2") == 0
    assert run(cfg_path, out, "train", "--resume", str(out / "last.ckpt")) == 0
    for name in ("metrics.jsonl", "last.ckpt"):
        assert (out / name).read_bytes() == (trained / name).read_bytes(), name


def test_resume_rejects_other_seed(trained, cfg_path, tmp_path):
    assert main(["train", "--config", cfg_path, "--out", str(trained), "--seed", "5",
                 "--resume", str(trained / "last.ckpt"), "--data", str(trained / "demos.rec")]) == 2


def test_eval_expert_succeeds(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "eval", "--expert", "--rollouts", "5") == 0
    rep = json.loads((tmp_path / "eval.json").read_text())
    assert rep["rate"] == 1.0 and rep["n"] == 5 and rep["successes"] == 5
    assert rep["seeds"] == list(range(5000, 5005))


def test_eval_reports_are_identical(trained, cfg_path, tmp_path):
    for d in ("a", "b"):
        assert run(cfg_path, tmp_path / d, "eval", "--model", str(trained / "last.ckpt")) == 0
    a, b = ((tmp_path / d / "eval.json").read_bytes() for d in ("a", "b"))
    assert a == b
    rep = json.loads(a)
    assert {"n", "successes", "rate", "seeds", "sr5", "config_hash", "seed", "build_id"} <= set(rep)


def test_eval_zero_rollouts_is_an_error(trained, cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "eval", "--model", str(trained / "last.ckpt"), "--rollouts", "0") == 2


def test_eval_corrupt_checkpoint(cfg_path, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert run(cfg_path, tmp_path, "eval", "--model", str(bad)) == 2
    assert "corrupt" in capsys.readouterr().err


def test_mask_sweep_and_report(trained, cfg_path, tmp_path):
    model = str(trained / "last.ckpt")
    assert run(cfg_path, tmp_path, "mask-sweep", "--model", model) == 0
    sweep = json.loads((tmp_path / "sweep.json").read_text())
    assert sweep["grid"] == [0.0, 1.0] and "full_mask_delta" in sweep["meta"]
    assert run(cfg_path, tmp_path, "report") == 0
    text = (tmp_path / "sweep.csv").read_text()
    assert text.startswith("# config_hash=")
    rows = list(csv.DictReader(io.StringIO(text.split("\n", 1)[1])))
    assert len(rows) == 2 and rows[0]["scheme"] == "channel"


def test_mask_sweep_repeatable(trained, cfg_path, tmp_path):
    model = str(trained / "last.ckpt")
    for d in ("a", "b"):
        assert run(cfg_path, tmp_path / d, "mask-sweep", "--model", model, "--seeds", "1") == 0
    assert (tmp_path / "a/sweep.json").read_bytes() == (tmp_path / "b/sweep.json").read_bytes()


def test_mask_sweep_grid_without_zero(trained, cfg_path, tmp_path, capsys):
    assert run(cfg_path, tmp_path, "mask-sweep", "--model", str(trained / "last.ckpt"), "--grid", "0.5,1") == 2
    assert "p=0" in capsys.readouterr().err


def test_report_missing_input(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "report") == 2


def test_bad_thread_env(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("VRDP_THREADS", "zero")
    assert run(cfg_path, tmp_path, "gen-demos") == 2


def test_seed_flag_changes_demos(cfg_path, tmp_path):
    assert main(["gen-demos", "--config", cfg_path, "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert run(cfg_path, tmp_path / "b", "gen-demos") == 0
    assert (tmp_path / "a/demos.rec").read_bytes() != (tmp_path / "b/demos.rec").read_bytes()


def test_verify_quick(cfg_path, tmp_path, capsys):
    assert run(cfg_path, tmp_path, "verify", "--quick") == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert rep["passed"] and len(rep["checks"]) == 6
    assert capsys.readouterr().out.count("PASS") == 6
