"""Command-line driver.

Each command reads one TOML config (or pure defaults), derives its own seed
substream from [run] seed, writes its artifacts under the output directory,
and drops a manifest recording inputs, outputs, sha256 hashes, seed, and
wall time. `pipeline` chains the whole attack end to end and finishes with
a gate on the headline effectiveness/stealth numbers.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numeric failure,
5 gate failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

from . import __version__
from .backdoor import TriggerPattern, dataset_digest, load_dataset, save_dataset, synthesize
from .bc import bc_train
from .config import RunConfig, config_doc, load_config, save_config
from .errors import (ConfigError, GateError, MissingArtifactError, NumericError,
                     TrojArenaError)
from .gradcheck import GRADCHECK_TOL, run_all
from .harness import (EvalMode, defend_finetune, evaluate, headline,
                      sweep_poisoning_rate, sweep_trigger_length,
                      sweep_trigger_pattern, write_report)
from .policy import RecurrentPolicy
from .ppo import train_fastfail, train_selfplay
from .rng import derive_seed

_EXIT_MAP = ((ConfigError, 2), (MissingArtifactError, 3), (NumericError, 4),
             (GateError, 5), (TrojArenaError, 1))


# ---------- small plumbing ----------

def _file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _short(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _log(prefix: str):
    def log(row: dict) -> None:
        print(f"[{prefix}] " + " ".join(f"{k}={_short(v)}" for k, v in row.items()),
              flush=True)
    return log


def _write_json(obj, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


_PPO_CURVE_FIELDS = ("update_index", "side", "mean_return", "mean_episode_len",
                     "win_rate", "tie_rate", "fail_rate")
_BC_CURVE_FIELDS = ("epoch", "train_loss", "clean_win", "clean_tie", "clean_fail",
                    "trig_win", "trig_tie", "trig_fail")
_CURVE_RENAMES = {"update": "update_index", "mean_length": "mean_episode_len",
                  "loss": "train_loss"}


def _write_curve(rows: list[dict], base: str, fields: tuple) -> dict:
    """Write a training curve as full JSON plus a fixed-column CSV."""
    _write_json(rows, base + ".json")
    tmp = base + ".csv.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), restval="",
                                extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({_CURVE_RENAMES.get(k, k): v for k, v in row.items()})
    os.replace(tmp, base + ".csv")
    return {"curve": base + ".json", "curve_csv": base + ".csv"}


def _paths(cfg: RunConfig) -> dict:
    out = cfg.out
    env = cfg.env.kind.value
    tag = f"{env}_seed{cfg.seed}"
    return {
        "win": os.path.join(out, "win.json"),
        "win_opponent": os.path.join(out, "win_opponent.json"),
        "fail": os.path.join(out, "fail.json"),
        "dataset": os.path.join(out, "dataset.jsonl"),
        "victim": os.path.join(out, "victim.json"),
        "victim_finetuned": os.path.join(out, "victim_finetuned.json"),
        "headline": os.path.join(out, f"eval_{tag}"),
        "eval_mode": lambda mode: os.path.join(out, f"eval_{env}_{mode}_seed{cfg.seed}"),
        "sweep": lambda axis: os.path.join(out, f"sweep_{axis}_{tag}"),
        "defense": os.path.join(out, f"defense_{tag}"),
        "gradcheck": os.path.join(out, "gradcheck.json"),
    }


def _load_policy(path: str, role: str | None = None) -> RecurrentPolicy:
    policy = RecurrentPolicy.load(path)
    if role is not None and policy.role != role:
        raise ConfigError(f"{path} holds a {policy.role!r} policy, expected {role!r}")
    return policy


def _write_manifest(cfg: RunConfig, command: str, inputs: dict, outputs: dict,
                    t0: float, warnings=(), extra: dict | None = None) -> str:
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "deterministic": cfg.deterministic,
        "config": config_doc(cfg),
        "inputs": {k: {"path": p, "sha256": _file_digest(p)} for k, p in inputs.items()},
        "outputs": {k: {"path": p, "sha256": _file_digest(p)} for k, p in outputs.items()},
        "warnings": list(warnings),
    }
    if extra:
        manifest.update(extra)
    manifest["wall_time_s"] = round(time.monotonic() - t0, 3)
    path = os.path.join(cfg.out, f"manifest_{command}.json")
    _write_json(manifest, path)
    print(f"[{command}] done in {manifest['wall_time_s']}s, manifest {path}")
    return path


# ---------- commands ----------

def cmd_selfplay(cfg: RunConfig, args) -> int:
    t0 = time.monotonic()
    paths = _paths(cfg)
    res = train_selfplay(cfg.env, cfg.ppo, derive_seed(cfg.seed, "stage.selfplay"),
                         log=_log("selfplay"))
    res.policy_1.save(paths["win"])
    res.policy_2.save(paths["win_opponent"])
    curves = _write_curve(res.curve, os.path.join(cfg.out, "curve_selfplay"),
                          _PPO_CURVE_FIELDS)
    for w in res.warnings:
        print(f"[selfplay] warning: {w}")
    _write_manifest(cfg, "selfplay", {},
                    {"win": paths["win"], "win_opponent": paths["win_opponent"],
                     **curves}, t0, res.warnings)
    return 0


def cmd_fastfail(cfg: RunConfig, args) -> int:
    t0 = time.monotonic()
    paths = _paths(cfg)
    opponent = _load_policy(paths["win_opponent"], "win")
    res = train_fastfail(cfg.env, opponent, cfg.ppo,
                         derive_seed(cfg.seed, "stage.fastfail"), log=_log("fastfail"))
    res.policy_1.save(paths["fail"])
    curves = _write_curve(res.curve, os.path.join(cfg.out, "curve_fastfail"),
                          _PPO_CURVE_FIELDS)
    _write_manifest(cfg, "fastfail", {"win_opponent": paths["win_opponent"]},
                    {"fail": paths["fail"], **curves}, t0, res.warnings)
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    t0 = time.monotonic()
    paths = _paths(cfg)
    win = _load_policy(paths["win"], "win")
    fail = _load_policy(paths["fail"], "fail")
    opponent = _load_policy(paths["win_opponent"], "win")
    n = args.episodes if getattr(args, "episodes", None) else cfg.bc.dataset_episodes
    ds = synthesize(cfg.env, win, fail, cfg.trigger, n,
                    derive_seed(cfg.seed, "stage.synth"),
                    workers=cfg.workers, opponent=opponent)
    save_dataset(ds, paths["dataset"])
    print(f"[synth] {n} episodes, poisoned fraction {ds.poisoned_fraction():.3f}")
    _write_manifest(cfg, "synth",
                    {"win": paths["win"], "fail": paths["fail"],
                     "win_opponent": paths["win_opponent"]},
                    {"dataset": paths["dataset"]}, t0)
    return 0


def cmd_clone(cfg: RunConfig, args) -> int:
    t0 = time.monotonic()
    paths = _paths(cfg)
    dataset_path = getattr(args, "dataset", None) or paths["dataset"]
    ds = load_dataset(dataset_path)

    probe_fn = None
    if os.path.exists(paths["win_opponent"]) and not getattr(args, "no_probe", False):
        opponent = _load_policy(paths["win_opponent"], "win")

        def probe_fn(policy, epoch):
            rep_t = evaluate(policy, opponent, cfg.env, EvalMode.TRIGGERED, 100,
                             derive_seed(cfg.seed, f"probe.trig.{epoch}"),
                             trig=cfg.trigger, workers=cfg.workers)
            rep_c = evaluate(policy, opponent, cfg.env, EvalMode.CLEAN, 100,
                             derive_seed(cfg.seed, f"probe.clean.{epoch}"),
                             workers=cfg.workers)
            return {"clean_win": rep_c.rates["win"], "clean_tie": rep_c.rates["tie"],
                    "clean_fail": rep_c.rates["fail"], "trig_win": rep_t.rates["win"],
                    "trig_tie": rep_t.rates["tie"], "trig_fail": rep_t.rates["fail"]}

    res = bc_train(ds.episodes, cfg.bc, derive_seed(cfg.seed, "stage.clone"),
                   probe_fn=probe_fn, log=_log("clone"))
    res.policy.meta["dataset_sha256"] = dataset_digest(dataset_path)
    res.policy.save(paths["victim"])
    curves = _write_curve(res.curve, os.path.join(cfg.out, "curve_bc"),
                          _BC_CURVE_FIELDS)
    _write_manifest(cfg, "clone", {"dataset": dataset_path},
                    {"victim": paths["victim"], **curves}, t0)
    return 0


def cmd_eval(cfg: RunConfig, args):
    t0 = time.monotonic()
    paths = _paths(cfg)
    victim_path = getattr(args, "victim", None) or paths["victim"]
    victim = _load_policy(victim_path)
    opponent = _load_policy(paths["win_opponent"], "win")
    report = headline(victim, opponent, cfg.env, cfg.trigger, cfg.eval.n,
                      derive_seed(cfg.seed, "stage.eval"), workers=cfg.workers)
    outputs = {"headline": write_report(report, paths["headline"])}
    outputs["headline_csv"] = paths["headline"] + ".csv"
    for mode, rep in report.entries.items():
        outputs[f"eval_{mode}"] = write_report(rep, paths["eval_mode"](mode))
        print(f"[eval] {mode}: fail={rep.rates['fail']:.3f} "
              f"tie={rep.rates['tie']:.3f} win={rep.rates['win']:.3f} "
              f"mean_len={rep.mean_length:.1f}")
    _write_manifest(cfg, "eval",
                    {"victim": victim_path, "win_opponent": paths["win_opponent"]},
                    outputs, t0)
    return report


def cmd_sweep(cfg: RunConfig, args) -> int:
    t0 = time.monotonic()
    paths = _paths(cfg)
    axis = args.axis
    opponent = _load_policy(paths["win_opponent"], "win")
    inputs = {"win_opponent": paths["win_opponent"]}
    outputs = {}

    if axis == "length":
        victim_path = getattr(args, "victim", None) or paths["victim"]
        victim = _load_policy(victim_path)
        inputs["victim"] = victim_path
        report = sweep_trigger_length(victim, opponent, cfg.env, cfg.trigger,
                                      cfg.eval.lengths, cfg.eval.sweep_n,
                                      derive_seed(cfg.seed, "stage.sweep.length"),
                                      workers=cfg.workers)
    elif axis == "pattern":
        win = _load_policy(paths["win"], "win")
        fail = _load_policy(paths["fail"], "fail")
        inputs.update({"win": paths["win"], "fail": paths["fail"]})
        victims = {}
        for pat in TriggerPattern:
            print(f"[sweep] training victim for pattern {pat.value}")
            trig = replace(cfg.trigger, pattern=pat)
            ds = synthesize(cfg.env, win, fail, trig, cfg.bc.dataset_episodes,
                            derive_seed(cfg.seed, f"stage.sweep.pattern.synth.{pat.value}"),
                            workers=cfg.workers, opponent=opponent)
            res = bc_train(ds.episodes, cfg.bc,
                           derive_seed(cfg.seed, f"stage.sweep.pattern.bc.{pat.value}"))
            victims[pat] = res.policy
            vp = os.path.join(cfg.out, f"victim_{pat.value}.json")
            res.policy.save(vp)
            outputs[f"victim_{pat.value}"] = vp
        report = sweep_trigger_pattern(victims, opponent, cfg.env, cfg.trigger,
                                       list(TriggerPattern), cfg.eval.sweep_n,
                                       derive_seed(cfg.seed, "stage.sweep.pattern.eval"),
                                       workers=cfg.workers)
    elif axis == "poison":
        win = _load_policy(paths["win"], "win")
        fail = _load_policy(paths["fail"], "fail")
        inputs.update({"win": paths["win"], "fail": paths["fail"]})
        report, victims = sweep_poisoning_rate(
            cfg.env, win, fail, cfg.trigger, cfg.eval.rates, cfg.bc,
            n=cfg.eval.sweep_n, seed=derive_seed(cfg.seed, "stage.sweep.poison"),
            workers=cfg.workers, log=_log("sweep"), opponent=opponent)
        for rate, victim in victims.items():
            vp = os.path.join(cfg.out, f"victim_poison_{int(round(rate * 100))}pct.json")
            victim.save(vp)
            outputs[f"victim_poison_{int(round(rate * 100))}pct"] = vp
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")

    base = paths["sweep"](axis)
    outputs["report"] = write_report(report, base)
    outputs["report_csv"] = base + ".csv"
    for value, rep in zip(report.values, report.entries):
        print(f"[sweep] {report.axis}={value}: fail={rep.rates['fail']:.3f} "
              f"win={rep.rates['win']:.3f}")
    _write_manifest(cfg, f"sweep_{axis}", inputs, outputs, t0)
    return 0


def cmd_defend(cfg: RunConfig, args):
    t0 = time.monotonic()
    paths = _paths(cfg)
    victim_path = getattr(args, "victim", None) or paths["victim"]
    victim = _load_policy(victim_path)
    opponent = _load_policy(paths["win_opponent"], "win")
    expert = _load_policy(paths["win"], "win") if os.path.exists(paths["win"]) else None
    res = defend_finetune(victim, opponent, cfg.env, cfg.trigger,
                          derive_seed(cfg.seed, "stage.defense"),
                          n_clean=cfg.defense.clean_episodes,
                          epochs=cfg.defense.epochs, lr=cfg.defense.lr,
                          n_eval=cfg.defense.eval_n, workers=cfg.workers,
                          log=_log("defend"), expert=expert)
    res.finetuned.save(paths["victim_finetuned"])
    report_path = write_report(res, paths["defense"])
    for stage, reports in (("before", res.before), ("after", res.after)):
        for key, rep in reports.items():
            print(f"[defend] {stage} {key}: fail={rep.rates['fail']:.3f} "
                  f"win={rep.rates['win']:.3f}")
    print(f"[defend] benign: fail={res.benign.rates['fail']:.3f}")
    _write_manifest(cfg, "defend",
                    {"victim": victim_path, "win_opponent": paths["win_opponent"]},
                    {"victim_finetuned": paths["victim_finetuned"],
                     "report": report_path,
                     "report_csv": paths["defense"] + ".csv"}, t0)
    return res


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    t0 = time.monotonic()
    paths = _paths(cfg)
    rows = run_all(cfg.seed)
    worst = max(err for _, err in rows)
    for name, err in rows:
        print(f"[gradcheck] {name}: max_rel_err={err:.3e}")
    _write_json({"tolerance": GRADCHECK_TOL,
                 "scenarios": {name: err for name, err in rows},
                 "max_rel_err": worst}, paths["gradcheck"])
    _write_manifest(cfg, "gradcheck", {}, {"report": paths["gradcheck"]}, t0)
    if worst > GRADCHECK_TOL:
        raise NumericError(f"gradcheck max relative error {worst:.3e} > {GRADCHECK_TOL}")
    print(f"[gradcheck] ok, max relative error {worst:.3e}")
    return 0


def cmd_pipeline(cfg: RunConfig, args) -> int:
    t0 = time.monotonic()
    paths = _paths(cfg)
    cmd_selfplay(cfg, args)
    cmd_fastfail(cfg, args)
    cmd_synth(cfg, args)
    cmd_clone(cfg, args)
    report = cmd_eval(cfg, args)
    cmd_defend(cfg, args)

    trig = report.entries["triggered"]
    clean = report.entries["clean"]
    benign = report.entries["benign_baseline"]
    effect = trig.rates["fail"] - clean.rates["fail"]
    separated = trig.wilson["fail"][0] > clean.wilson["fail"][1]
    stealth = abs(clean.rates["fail"] - benign.rates["fail"])
    gate = {"effect_pts": effect, "intervals_separated": separated,
            "stealth_gap_pts": stealth}
    _write_manifest(cfg, "pipeline", {},
                    {k: paths[k] for k in ("win", "win_opponent", "fail",
                                           "dataset", "victim", "victim_finetuned")},
                    t0, extra={"gate": gate})
    if not (effect >= 0.15 and separated):
        raise GateError(f"attack effectiveness gate failed: triggered-clean fail gap "
                        f"{effect:.3f} (need >= 0.15 with separated intervals, "
                        f"separated={separated})")
    if stealth > 0.05:
        raise GateError(f"stealth gate failed: clean vs benign fail gap "
                        f"{stealth:.3f} > 0.05")
    print(f"[pipeline] gate ok: effect={effect:.3f} stealth_gap={stealth:.3f}")
    return 0


_COMMANDS = {
    "selfplay": cmd_selfplay,
    "fastfail": cmd_fastfail,
    "synth": cmd_synth,
    "clone": cmd_clone,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "defend": cmd_defend,
    "pipeline": cmd_pipeline,
    "gradcheck": cmd_gradcheck,
}


# ---------- argument parsing ----------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--out", help="overrides [run] out")
    common.add_argument("--workers", type=int, help="overrides [run] workers")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                        default=None, help="overrides [run] deterministic")

    p = argparse.ArgumentParser(prog="trojarena",
                                description="Backdoor attacks on two-player "
                                            "competitive RL, end to end.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("selfplay", parents=[common],
                   help="train winning policies by self-play")
    sub.add_parser("fastfail", parents=[common],
                   help="train the fast-failing policy by reward inversion")
    sp = sub.add_parser("synth", parents=[common],
                        help="synthesize the poisoned trajectory dataset")
    sp.add_argument("--episodes", type=int, help="dataset size override")
    sp = sub.add_parser("clone", parents=[common],
                        help="behavioral-clone the dataset into a victim")
    sp.add_argument("--dataset", help="dataset path override")
    sp.add_argument("--no-probe", action="store_true",
                    help="skip the in-training evaluation probes")
    sp = sub.add_parser("eval", parents=[common],
                        help="triggered/clean/benign headline evaluation")
    sp.add_argument("--victim", help="victim checkpoint override")
    sp = sub.add_parser("sweep", parents=[common],
                        help="trigger length / pattern / poisoning-rate sweeps")
    sp.add_argument("axis", choices=("length", "pattern", "poison"))
    sp.add_argument("--victim", help="victim checkpoint override (length sweep)")
    sp = sub.add_parser("defend", parents=[common],
                        help="fine-tuning defense, before/after measurement")
    sp.add_argument("--victim", help="victim checkpoint override")
    sub.add_parser("pipeline", parents=[common],
                   help="run selfplay, fastfail, synth, clone, eval, defend")
    sub.add_parser("gradcheck", parents=[common],
                   help="finite-difference verification of all gradients")
    return p


def _make_cfg(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config, seed_override=args.seed)
    else:
        cfg = RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {args.workers}")
        cfg.workers = args.workers
    if args.deterministic is not None:
        cfg.deterministic = args.deterministic
    os.makedirs(cfg.out, exist_ok=True)
    save_config(cfg, os.path.join(cfg.out, "config_used.toml"))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _make_cfg(args)
        result = _COMMANDS[args.command](cfg, args)
        return result if isinstance(result, int) else 0
    except TrojArenaError as exc:
        code = next(c for t, c in _EXIT_MAP if isinstance(exc, t))
        print(f"error[{code}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
