"""``vrdp`` command line: gen-demos, train, eval, mask-sweep, verify, report.

Every subcommand takes ``--config``, ``--seed`` and ``--out``; ``--out`` is a
directory and each command writes fixed file names inside it. Outputs are
written atomically and carry the (config hash, seed, build id) stamp.

Exit codes: 0 success, 1 a verification check failed, 2 bad input or
configuration, 3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, envs, evaluation, masklab, verify
from . import training as tr
from .config import ConfigError, RunConfig
from .model import PolicyModel
from .numerics import records
from .policy import ModelPolicy
from .provenance import stamp

log = logging.getLogger("vrdp")

DEMOS = "demos.rec"
METRICS = "metrics.jsonl"
LAST = "last.ckpt"
BEST = "best.ckpt"


class CommandError(Exception):
    """A user-facing failure; reported without a traceback."""

    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


# -- helpers ---------------------------------------------------------------
def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    return RunConfig.from_dict(d)


def run_stamp(cfg: RunConfig) -> dict:
    return stamp(cfg.config_hash(), cfg.seed)


def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Path, obj) -> None:
    records.atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> checkpoint.Checkpoint:
    try:
        return checkpoint.load(path)
    except FileNotFoundError:
        raise CommandError(f"checkpoint not found: {path}") from None
    except records.RecordFormatError as exc:
        raise CommandError(f"corrupt checkpoint: {exc}") from None


def model_policy(ck: checkpoint.Checkpoint) -> ModelPolicy:
    sched, sampler = ck.config.schedule_and_sampler()
    return ModelPolicy(ck.model, ck.stats, sched, sampler)


# -- commands --------------------------------------------------------------
def cmd_gen_demos(cfg: RunConfig, args) -> dict:
    out = out_dir(cfg) / DEMOS
    try:
        ds = tr.generate_demos(cfg.env_config(), cfg.env.n_demos, cfg.seed)
    except RuntimeError as exc:
        raise CommandError(str(exc)) from None
    ds.save(out, extra_meta=run_stamp(cfg))
    steps = [len(e["actions"]) for e in ds.episodes]
    summary = {"path": str(out), "task": ds.task, "episodes": len(steps), "steps": int(sum(steps))}
    print(json.dumps(summary, sort_keys=True))
    return summary


def _resume_state(path, cfg: RunConfig):
    ck = load_checkpoint(path)
    if ck.config.config_hash() != cfg.config_hash() or ck.config.seed != cfg.seed:
        raise CommandError("checkpoint was written by a different config or seed")
    return ck


def cmd_train(cfg: RunConfig, args) -> dict:
    out = out_dir(cfg)
    data_path = Path(args.data) if args.data else out / DEMOS
    try:
        ds = tr.DemoDataset.load(data_path)
    except FileNotFoundError:
        raise CommandError(f"dataset not found: {data_path} (run gen-demos first)") from None
    except records.RecordFormatError as exc:
        raise CommandError(f"corrupt dataset: {exc}") from None
    if ds.task != cfg.env.task:
        raise CommandError(f"dataset task {ds.task!r} does not match env.task {cfg.env.task!r}")

    tcfg = cfg.train_config()
    sched, sampler = cfg.schedule_and_sampler()
    data = tr.TrainingData.from_dataset(ds, tcfg.horizon, tcfg.n_obs)
    st = run_stamp(cfg)

    if args.resume:
        ck = _resume_state(args.resume, cfg)
        model, opt, start = ck.model, ck.opt, ck.epoch + 1
        rows, history = list(ck.meta.get("log", [])), ck.eval_history
        best = max((r for _, r in history), default=-1.0)
    else:
        model, opt, start = PolicyModel(cfg.model_config(), seed=cfg.seed), tr.AdamWState(), 1
        rows, history, best = [], [], -1.0
    end = tcfg.epochs if args.stop_after is None else min(tcfg.epochs, args.stop_after)
    if end < start:
        raise CommandError(f"nothing to do: checkpoint is at epoch {start - 1}")

    stats = ds.stats
    env = cfg.env_config()
    seeds = evaluation.eval_seeds(cfg.train.eval_seed_base, tcfg.eval_rollouts)

    def eval_fn(m, epoch):
        res = evaluation.evaluate(ModelPolicy(m, stats, sched, sampler), env, seeds, tcfg.n_obs,
                                  tcfg.n_action_steps)
        return envs.success_rate(res)

    def meta():
        return dict(st, log=rows, eval_history=history)

    def on_epoch(rec):
        nonlocal best
        rows.append(dict(rec, **st))
        records.atomic_write_text(out / METRICS, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        log.info("epoch %d loss %.5f%s", rec["epoch"], rec.get("total", float("nan")),
                 f" eval {rec['eval_success_rate']:.2f}" if "eval_success_rate" in rec else "")
        if "eval_success_rate" in rec:
            history.append([rec["epoch"], rec["eval_success_rate"]])
            if rec["eval_success_rate"] > best:
                best = rec["eval_success_rate"]
                checkpoint.save(out / BEST, checkpoint.Checkpoint(cfg, model, stats, opt, rec["epoch"], meta()))

    try:
        tr.train(model, data, sched, cfg.vr.beta, tcfg, cfg.seed, opt=opt, start_epoch=start,
                 end_epoch=end, eval_fn=eval_fn, on_epoch=on_epoch)
    except tr.TrainingDiverged as exc:
        raise CommandError(str(exc), code=3) from None
    checkpoint.save(out / LAST, checkpoint.Checkpoint(cfg, model, stats, opt, end, meta()))
    summary = {"epochs": end, "final_loss": rows[-1]["total"], "eval_history": history,
               "sr5": envs.sr5([r for _, r in history]) if len(history) >= 5 else None}
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_eval(cfg: RunConfig, args) -> dict:
    n = cfg.eval.n_rollouts if args.rollouts is None else args.rollouts
    if n < 1:
        raise CommandError("need at least one rollout")
    seeds = evaluation.eval_seeds(cfg.eval.seed_base, n)
    st = run_stamp(cfg)
    if args.expert:
        env = cfg.env_config()
        policy = envs.ExpertPolicy(env, cfg.net.horizon)
        n_obs, n_act, history = cfg.net.n_obs, cfg.train.n_action_steps, []
        source = {"policy": "expert"}
    else:
        ck = load_checkpoint(args.model or Path(cfg.out) / LAST)
        env, policy = ck.config.env_config(), model_policy(ck)
        n_obs, n_act, history = ck.config.net.n_obs, ck.config.train.n_action_steps, ck.eval_history
        source = {"policy": "model", "checkpoint_epoch": ck.epoch, "model_config_hash": ck.config.config_hash(),
                  "model_seed": ck.config.seed}
    res = evaluation.evaluate(policy, env, seeds, n_obs, n_act)
    rates = [r for _, r in history]
    report = dict(st, **source, task=env.task, n=n, successes=sum(r.success for r in res),
                  rate=envs.success_rate(res), seeds=seeds,
                  failures=[{"seed": r.seed, "final_distance": r.final_distance, "aborted": r.aborted}
                            for r in res if not r.success],
                  eval_history=history, sr5=envs.sr5(rates) if len(rates) >= 5 else None)
    write_json(out_dir(cfg) / "eval.json", report)
    print(json.dumps({k: report[k] for k in ("n", "successes", "rate", "sr5")}, sort_keys=True))
    return report


def _grid(text: str | None, default: list) -> list:
    if text is None:
        return list(default)
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CommandError(f"bad --grid {text!r}; expected comma-separated floats") from None


def cmd_mask_sweep(cfg: RunConfig, args) -> dict:
    m = cfg.masklab
    ck = load_checkpoint(args.model or Path(cfg.out) / LAST)
    policy = model_policy(ck)
    scale = m.corruption_scale if args.corrupt is None else args.corrupt
    target, scheme = args.target or m.target, args.scheme or m.scheme
    idx = args.idx if args.idx is not None else m.idx
    try:
        corruption = None
        if scale > 0:
            key = masklab.MaskSpec(target, scheme, 0.0, 0, idx).hook_key
            corruption = masklab.NoiseInjection(scale, key, seed=cfg.seed)
        report = masklab.mask_sweep(
            policy, ck.config.env_config(), target=target, scheme=scheme,
            grid=_grid(args.grid, m.grid), n_seeds=args.seeds or m.n_seeds,
            n_rollouts=args.rollouts or m.n_rollouts, idx=idx,
            episode_seed_base=m.seed_base, n_obs=ck.config.net.n_obs,
            n_action_steps=ck.config.train.n_action_steps, corruption=corruption)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    report.meta.update(run_stamp(cfg), model_config_hash=ck.config.config_hash(), checkpoint_epoch=ck.epoch)
    if 1.0 in report.grid:
        peak, full = masklab.snr_metrics(report)
        report.meta.update(peak_gain=peak, full_mask_delta=full)
    records.atomic_write_text(out_dir(cfg) / "sweep.json", report.to_json() + "\n")
    print(json.dumps({"baseline": report.baseline, "means": [report.mean(p) for p in report.grid]}))
    return json.loads(report.to_json())


def cmd_verify(cfg: RunConfig, args) -> dict:
    checks = verify.run_suite(quick=args.quick)
    result = dict(run_stamp(cfg), passed=all(c["passed"] for c in checks), checks=checks)
    write_json(out_dir(cfg) / "verify.json", _jsonable(result))
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}")
    if not result["passed"]:
        raise CommandError("verification failed", code=1)
    return result


def cmd_report(cfg: RunConfig, args) -> str:
    src = Path(args.input) if args.input else Path(cfg.out) / "sweep.json"
    try:
        report = masklab.SweepReport.from_json(src.read_text())
    except FileNotFoundError:
        raise CommandError(f"sweep report not found: {src}") from None
    except (ValueError, TypeError, KeyError) as exc:
        raise CommandError(f"bad sweep report {src}: {exc}") from None
    m = report.meta
    header = (f"# config_hash={m.get('config_hash', cfg.config_hash())} seed={m.get('seed', cfg.seed)} "
              f"build_id={m.get('build_id', run_stamp(cfg)['build_id'])}\n")
    text = header + report.to_csv()
    records.atomic_write_text(out_dir(cfg) / "sweep.csv", text)
    sys.stdout.write(text)
    return text


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


# -- parser ------------------------------------------------------------------
COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train": cmd_train,
    "eval": cmd_eval,
    "mask-sweep": cmd_mask_sweep,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are used for missing keys)")
    common.add_argument("--seed", type=int, help="root seed, overrides the config")
    common.add_argument("--out", help="output directory, overrides the config")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="vrdp", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-demos", parents=[common], help="roll out the scripted expert and save demos")

    p = sub.add_parser("train", parents=[common], help="train a policy on saved demos")
    p.add_argument("--data", help=f"dataset file (default OUT/{DEMOS})")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop after this epoch; the schedule still spans train.epochs")

    p = sub.add_parser("eval", parents=[common], help="success rate over seeded rollouts")
    p.add_argument("--model", help=f"checkpoint (default OUT/{LAST})")
    p.add_argument("--rollouts", type=int, help="number of rollouts (default eval.n_rollouts)")
    p.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead of a model")

    p = sub.add_parser("mask-sweep", parents=[common], help="success rate versus feature mask rate")
    p.add_argument("--model", help=f"checkpoint (default OUT/{LAST})")
    p.add_argument("--target", choices=("backbone", "skip"))
    p.add_argument("--scheme", choices=("channel", "point"))
    p.add_argument("--idx", type=int, help="skip index (0 deepest, 1 shallowest)")
    p.add_argument("--grid", help="comma-separated mask rates; must include 0")
    p.add_argument("--seeds", type=int, help="mask seeds per rate")
    p.add_argument("--rollouts", type=int, help="rollouts per mask seed")
    p.add_argument("--corrupt", type=float, help="std of fixed noise added to the masked feature")

    p = sub.add_parser("verify", parents=[common], help="run the numerical self-checks")
    p.add_argument("--quick", action="store_true", help="smaller sample sizes")

    p = sub.add_parser("report", parents=[common], help="convert a sweep JSON to CSV")
    p.add_argument("--input", help="sweep JSON (default OUT/sweep.json)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        evaluation.worker_count()
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except CommandError as exc:
        print(f"vrdp {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ValueError, OSError) as exc:
        print(f"vrdp {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
