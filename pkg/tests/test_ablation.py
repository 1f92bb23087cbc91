import csv
import io

from vrdp import ablation
from vrdp.config import RunConfig

TINY = RunConfig.from_dict({
    "net": {"down_dims": [8, 16, 32], "n_groups": 4, "time_embed_dim": 16, "cond_dim": 16, "encoder_hidden": 16},
    "train": {"epochs": 5, "eval_every": 1, "eval_rollouts": 2, "warmup_steps": 2},
    "env": {"n_demos": 2},
})


def test_variants_cover_grid():
    names = [n for n, _ in ablation.variants(TINY)]
    assert names == ["beta=0", "beta=1e-09", "beta=1e-06", "beta=0.001", "no_timestep"]
    cfgs = dict(ablation.variants(TINY))
    assert not cfgs["no_timestep"].vr.use_timestep and cfgs["no_timestep"].vr.beta == TINY.vr.beta
    assert all(c.vr.enabled for c in cfgs.values())


def test_ablation_csv():
    rows = ablation.ablation_rows(TINY, final_rollouts=2)
    text = ablation.to_csv(rows, {"config_hash": TINY.config_hash(), "seed": 0})
    lines = text.splitlines()
    assert lines[0].startswith("# config_hash=")
    parsed = list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))
    assert len(parsed) == 5
    assert {r["variant"] for r in parsed} >= {"beta=0", "no_timestep"}
    assert all(0.0 <= float(r["final_rate"]) <= 1.0 and float(r["sr5"]) >= 0 for r in parsed)
    # beta=0 still reports the KL it does not penalise
    assert float(parsed[0]["final_kl"]) > 0


def test_run_experiment_history():
    res = ablation.run_experiment(TINY, final_rollouts=2)
    assert [e for e, _ in res.history] == [1, 2, 3, 4, 5]
    assert res.vr_fraction > 0
