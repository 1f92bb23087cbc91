"""Train-and-evaluate runs, and the beta / timestep ablation table.

``python -m vrdp.ablation --config C --out DIR`` trains one policy per
variant (beta in {0, 1e-9, 1e-6, 1e-3}, plus VR without the timestep input)
and writes ``DIR/ablation.csv``.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from . import envs, evaluation
from . import training as tr
from .config import RunConfig
from .model import PolicyModel
from .numerics import records
from .policy import ModelPolicy
from .provenance import stamp

BETAS = (0.0, 1e-9, 1e-6, 1e-3)


@dataclass
class RunResult:
    history: list  # (epoch, success rate) per periodic evaluation
    final_rate: float
    log: list
    vr_fraction: float
    model: PolicyModel
    stats: dict
    seconds: float  # CPU time of the whole run

    @property
    def sr5(self) -> float:
        return envs.sr5([r for _, r in self.history])


def run_experiment(cfg: RunConfig, ds: tr.DemoDataset | None = None, final_rollouts: int | None = None) -> RunResult:
    """Train per ``cfg`` and evaluate periodically and once at the end."""
    t0 = time.process_time()
    if ds is None:
        ds = tr.generate_demos(cfg.env_config(), cfg.env.n_demos, cfg.seed)
    tcfg = cfg.train_config()
    sched, sampler = cfg.schedule_and_sampler()
    env = cfg.env_config()
    model = PolicyModel(cfg.model_config(), seed=cfg.seed)
    stats = ds.stats

    def rate(seeds):
        res = evaluation.evaluate(ModelPolicy(model, stats, sched, sampler), env, seeds, tcfg.n_obs,
                                  tcfg.n_action_steps)
        return envs.success_rate(res)

    history = []

    def eval_fn(m, epoch):
        r = rate(evaluation.eval_seeds(cfg.train.eval_seed_base, tcfg.eval_rollouts))
        history.append((epoch, r))
        return r

    data = tr.TrainingData.from_dataset(ds, tcfg.horizon, tcfg.n_obs)
    _, log, _ = tr.train(model, data, sched, cfg.vr.beta, tcfg, cfg.seed, eval_fn=eval_fn)
    final = rate(evaluation.eval_seeds(cfg.eval.seed_base, final_rollouts or cfg.eval.n_rollouts))
    return RunResult(history, final, log, model.vr_parameter_count() / model.num_parameters(), model, stats,
                     time.process_time() - t0)


def variants(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    out = []
    base = cfg.to_dict()
    for beta in BETAS:
        d = dict(base, vr=dict(base["vr"], enabled=True, beta=beta, use_timestep=True))
        out.append((f"beta={beta:g}", RunConfig.from_dict(d)))
    d = dict(base, vr=dict(base["vr"], enabled=True, use_timestep=False))
    out.append(("no_timestep", RunConfig.from_dict(d)))
    return out


def ablation_rows(cfg: RunConfig, final_rollouts: int | None = None) -> list[dict]:
    ds = tr.generate_demos(cfg.env_config(), cfg.env.n_demos, cfg.seed)
    rows = []
    for name, vcfg in variants(cfg):
        res = run_experiment(vcfg, ds, final_rollouts)
        rows.append({"variant": name, "beta": vcfg.vr.beta, "use_timestep": vcfg.vr.use_timestep,
                     "task": vcfg.env.task, "epochs": vcfg.train.epochs,
                     "sr5": res.sr5 if len(res.history) >= 5 else "", "final_rate": res.final_rate,
                     "final_kl": res.log[-1]["kl"], "final_mse": res.log[-1]["mse"]})
    return rows


def to_csv(rows: list[dict], provenance: dict) -> str:
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in sorted(provenance.items())) + "\n")
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m vrdp.ablation", description="beta and timestep ablation")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    args = p.parse_args(argv)
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = RunConfig.from_dict(dict(cfg.to_dict(), seed=args.seed))
    text = to_csv(ablation_rows(cfg), stamp(cfg.config_hash(), cfg.seed))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    records.atomic_write_text(Path(args.out) / "ablation.csv", text)
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
