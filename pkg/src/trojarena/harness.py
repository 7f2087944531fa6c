"""Evaluation protocols and report plumbing.

Headline evaluation runs a victim against one of three opponent modes:

  * TRIGGERED        the winning opponent wrapped in the triggering adversary,
                     with the trigger shown in every episode (p_trg forced to 1)
  * CLEAN            the plain winning opponent, no trigger anywhere
  * BENIGN_BASELINE  the winning policy plays the victim slot itself, which
                     calibrates what "normal" failing/winning rates look like

On top of that sit the sweeps (trigger length, trigger pattern, poisoning
rate), the fine-tuning defense, and a hidden-state memory probe. Every entry
point is deterministic given its seed; episode-level work is parallel over
indexed substreams and merged in index order, so worker count never changes
results.

Reports serialize to JSON (full document) plus a flat CSV with one row per
evaluated mode/value, mirroring how results tables are usually laid out.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .backdoor import Adversary, TriggerPattern, TriggerSpec, synthesize
from .bc import BCConfig, bc_train
from .engine import EnvSpec, Outcome, observe, reset, step
from .errors import ConfigError, MissingArtifactError, NumericError
from .policy import ActMode, RecurrentPolicy
from .rng import Xoshiro256pp, derive_seed, stream
from .rollout import PolicyActor, play_episode

_CSV_FIELDS = ["label", "env", "mode", "value", "n",
               "fail_rate", "fail_lo", "fail_hi",
               "tie_rate", "tie_lo", "tie_hi",
               "win_rate", "win_lo", "win_hi",
               "mean_length", "seed"]


def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """95% (by default) Wilson score interval for k successes out of n."""
    if n < 1:
        return (0.0, 1.0)
    if not 0 <= k <= n:
        raise ConfigError(f"wilson_interval needs 0 <= k <= n, got k={k} n={n}")
    phat = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (phat + z2 / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z2 / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


class EvalMode(str, Enum):
    TRIGGERED = "triggered"
    CLEAN = "clean"
    BENIGN_BASELINE = "benign_baseline"


# ---------- single-mode evaluation ----------

@dataclass
class EvalReport:
    env: str
    mode: str
    victim_digest: str
    opponent_digest: str
    trigger: Optional[dict]
    n: int
    seed: int
    counts: dict                 # {"fail": int, "tie": int, "win": int}
    rates: dict
    wilson: dict                 # outcome -> (lo, hi)
    mean_length: float
    mean_steps_to_fail: float
    fall_rate: float

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("evaluation report needs n >= 1")
        if sum(self.counts.values()) != self.n:
            raise ConfigError("evaluation counts do not sum to n")
        if abs(sum(self.rates.values()) - 1.0) > 1e-9:
            raise ConfigError("evaluation rates do not sum to 1")

    def to_doc(self) -> dict:
        return {
            "env": self.env,
            "mode": self.mode,
            "victim_digest": self.victim_digest,
            "opponent_digest": self.opponent_digest,
            "trigger": self.trigger,
            "n": self.n,
            "seed": self.seed,
            "counts": dict(self.counts),
            "rates": dict(self.rates),
            "wilson": {k: list(v) for k, v in self.wilson.items()},
            "mean_length": self.mean_length,
            "mean_steps_to_fail": self.mean_steps_to_fail,
            "fall_rate": self.fall_rate,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "EvalReport":
        return cls(
            env=doc["env"], mode=doc["mode"],
            victim_digest=doc["victim_digest"],
            opponent_digest=doc["opponent_digest"],
            trigger=doc.get("trigger"),
            n=int(doc["n"]), seed=int(doc["seed"]),
            counts={k: int(v) for k, v in doc["counts"].items()},
            rates={k: float(v) for k, v in doc["rates"].items()},
            wilson={k: tuple(v) for k, v in doc["wilson"].items()},
            mean_length=float(doc["mean_length"]),
            mean_steps_to_fail=float(doc["mean_steps_to_fail"]),
            fall_rate=float(doc["fall_rate"]),
        )

    def csv_rows(self, label: str = "", value="") -> list[dict]:
        row = {"label": label or self.mode, "env": self.env, "mode": self.mode,
               "value": value, "n": self.n, "seed": self.seed,
               "mean_length": self.mean_length}
        for key in ("fail", "tie", "win"):
            lo, hi = self.wilson[key]
            row[f"{key}_rate"] = self.rates[key]
            row[f"{key}_lo"] = lo
            row[f"{key}_hi"] = hi
        return [row]


def _eval_range(env_spec: EnvSpec, victim: RecurrentPolicy,
                opponent: RecurrentPolicy, mode: EvalMode,
                trig: Optional[TriggerSpec], seed: int,
                lo: int, hi: int) -> list[tuple]:
    rows = []
    contestant = opponent if mode is EvalMode.BENIGN_BASELINE else victim
    for i in range(lo, hi):
        rng_v = stream(seed, "eval.victim", i)
        rng_o = stream(seed, "eval.opp", i)
        if mode is EvalMode.TRIGGERED:
            opp_actor = Adversary(opponent, trig)
        else:
            opp_actor = PolicyActor(opponent)
        pb = play_episode(env_spec, PolicyActor(contestant), opp_actor,
                          rng_v, rng_o)
        rows.append((pb.victim_outcome, pb.length,
                     pb.steps_to_fail(env_spec.t_max),
                     pb.victim_fall_step is not None))
    return rows


def evaluate(victim: RecurrentPolicy, opponent: RecurrentPolicy,
             env_spec: EnvSpec, mode, n: int, seed: int,
             trig: Optional[TriggerSpec] = None, workers: int = 1) -> EvalReport:
    """Run n episodes of victim vs opponent under `mode` and tabulate.

    TRIGGERED shows the trigger every episode regardless of the spec's
    synthesis-time p_trg. BENIGN_BASELINE ignores `victim` and plays the
    winning policy against itself.
    """
    mode = EvalMode(mode)
    if n < 1:
        raise ConfigError(f"evaluation needs n >= 1, got {n}")
    if mode is EvalMode.TRIGGERED:
        if trig is None:
            raise ConfigError("TRIGGERED evaluation needs a trigger spec")
        trig = replace(trig, p_trg=1.0)
        trig.validate_for(env_spec)
    else:
        trig = None

    if workers > 1:
        chunk = (n + workers - 1) // workers
        bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
        rows = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_eval_range, env_spec, victim, opponent,
                                   mode, trig, seed, lo, hi)
                       for lo, hi in bounds]
            for fut in futures:   # submission order == index order
                rows.extend(fut.result())
    else:
        rows = _eval_range(env_spec, victim, opponent, mode, trig, seed, 0, n)

    outcomes = [r[0] for r in rows]
    counts = {"fail": outcomes.count("L"), "tie": outcomes.count("T"),
              "win": outcomes.count("W")}
    contestant = opponent if mode is EvalMode.BENIGN_BASELINE else victim
    return EvalReport(
        env=env_spec.kind.value,
        mode=mode.value,
        victim_digest=contestant.digest(),
        opponent_digest=opponent.digest(),
        trigger=trig.to_doc() if trig is not None else None,
        n=n,
        seed=seed,
        counts=counts,
        rates={k: v / n for k, v in counts.items()},
        wilson={k: wilson_interval(v, n) for k, v in counts.items()},
        mean_length=float(np.mean([r[1] for r in rows])),
        mean_steps_to_fail=float(np.mean([r[2] for r in rows])),
        fall_rate=sum(r[3] for r in rows) / n,
    )


@dataclass
class HeadlineReport:
    """Triggered / clean / benign rows for one victim, one table."""
    entries: dict       # mode value -> EvalReport, insertion-ordered

    def to_doc(self) -> dict:
        return {mode: rep.to_doc() for mode, rep in self.entries.items()}

    def csv_rows(self) -> list[dict]:
        rows = []
        for mode, rep in self.entries.items():
            rows.extend(rep.csv_rows(label=mode))
        return rows


def headline(victim: RecurrentPolicy, opponent: RecurrentPolicy,
             env_spec: EnvSpec, trig: TriggerSpec, n: int, seed: int,
             workers: int = 1) -> HeadlineReport:
    """The three-row table every attack writeup starts with."""
    entries = {}
    for mode, t in ((EvalMode.TRIGGERED, trig), (EvalMode.CLEAN, None),
                    (EvalMode.BENIGN_BASELINE, None)):
        entries[mode.value] = evaluate(
            victim, opponent, env_spec, mode, n,
            derive_seed(seed, f"headline.{mode.value}"), trig=t, workers=workers)
    return HeadlineReport(entries=entries)


# ---------- sweeps ----------

@dataclass
class SweepReport:
    axis: str
    values: list
    entries: list          # EvalReport per value, same order

    def __post_init__(self):
        if len(self.values) != len(self.entries):
            raise ConfigError("sweep values and entries length mismatch")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        numeric = all(isinstance(v, (int, float)) for v in self.values)
        if numeric and any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError(f"sweep values must be strictly increasing: {self.values}")

    def to_doc(self) -> dict:
        return {"axis": self.axis,
                "entries": [{"value": v, "report": r.to_doc()}
                            for v, r in zip(self.values, self.entries)]}

    @classmethod
    def from_doc(cls, doc: dict) -> "SweepReport":
        values = [e["value"] for e in doc["entries"]]
        entries = [EvalReport.from_doc(e["report"]) for e in doc["entries"]]
        return cls(axis=doc["axis"], values=values, entries=entries)

    def csv_rows(self) -> list[dict]:
        rows = []
        for v, rep in zip(self.values, self.entries):
            rows.extend(rep.csv_rows(label=f"{self.axis}={v}", value=v))
        return rows

    def rate(self, key: str) -> list[float]:
        return [rep.rates[key] for rep in self.entries]


def sweep_trigger_length(victim: RecurrentPolicy, opponent: RecurrentPolicy,
                         env_spec: EnvSpec, base_trig: TriggerSpec,
                         lengths=(5, 10, 30, 50, 100), n: int = 200,
                         seed: int = 0, workers: int = 1) -> SweepReport:
    """TRIGGERED evaluation of one victim across trigger lengths."""
    lengths = [int(v) for v in lengths]
    entries = []
    for length in lengths:
        trig = replace(base_trig, length=length)
        trig.validate_for(env_spec)
        entries.append(evaluate(victim, opponent, env_spec, EvalMode.TRIGGERED,
                                n, derive_seed(seed, f"sweep.length.{length}"),
                                trig=trig, workers=workers))
    return SweepReport(axis="trigger_length", values=lengths, entries=entries)


def sweep_trigger_pattern(victims: dict, opponent: RecurrentPolicy,
                          env_spec: EnvSpec, base_trig: TriggerSpec,
                          patterns=None, n: int = 200, seed: int = 0,
                          workers: int = 1) -> SweepReport:
    """TRIGGERED evaluation, one victim per pattern (patterns are baked in
    at synthesis time, so each needs its own clone)."""
    if patterns is None:
        patterns = list(TriggerPattern)
    patterns = [TriggerPattern(p) for p in patterns]
    entries = []
    for pat in patterns:
        if pat not in victims:
            raise ConfigError(f"no trained victim for trigger pattern {pat.value!r}")
        trig = replace(base_trig, pattern=pat)
        entries.append(evaluate(victims[pat], opponent, env_spec,
                                EvalMode.TRIGGERED, n,
                                derive_seed(seed, f"sweep.pattern.{pat.value}"),
                                trig=trig, workers=workers))
    return SweepReport(axis="trigger_pattern",
                       values=[p.value for p in patterns], entries=entries)


def sweep_poisoning_rate(env_spec: EnvSpec, win: RecurrentPolicy,
                         fail: RecurrentPolicy, base_trig: TriggerSpec,
                         rates=(0.1, 0.2, 0.3, 0.4), bc_cfg: Optional[BCConfig] = None,
                         dataset_episodes: int = 1000, n: int = 200,
                         seed: int = 0, workers: int = 1, log=None,
                         opponent: Optional[RecurrentPolicy] = None) -> tuple[SweepReport, dict]:
    """Synthesize + clone one victim per poisoning rate, then evaluate each
    TRIGGERED. Returns the sweep and the trained victims keyed by rate.
    `opponent` is the adversary-side winner; defaults to `win` (symmetric).
    The per-rate dataset is deliberately smaller than the headline one; the
    sweep compares rates against each other, not against the main victim."""
    bc_cfg = bc_cfg or BCConfig()
    n_data = dataset_episodes
    opp = opponent if opponent is not None else win
    rates = [float(r) for r in rates]
    entries = []
    victims = {}
    for rate in rates:
        if log:
            log({"stage": "poison_sweep", "rate": rate})
        strig = replace(base_trig, p_trg=rate)
        ds = synthesize(env_spec, win, fail, strig, n_data,
                        derive_seed(seed, f"poison.synth.{rate!r}"),
                        workers=workers, opponent=opp)
        res = bc_train(ds.episodes, bc_cfg, derive_seed(seed, f"poison.bc.{rate!r}"))
        victims[rate] = res.policy
        entries.append(evaluate(res.policy, opp, env_spec, EvalMode.TRIGGERED,
                                n, derive_seed(seed, f"poison.eval.{rate!r}"),
                                trig=base_trig, workers=workers))
    return SweepReport(axis="poisoning_rate", values=rates, entries=entries), victims


# ---------- fine-tuning defense ----------

@dataclass
class DefenseResult:
    finetuned: RecurrentPolicy
    before: dict           # {"triggered": EvalReport, "clean": EvalReport}
    after: dict
    benign: EvalReport
    curve: list = field(default_factory=list)

    def to_doc(self) -> dict:
        return {
            "finetuned_digest": self.finetuned.digest(),
            "before": {k: r.to_doc() for k, r in self.before.items()},
            "after": {k: r.to_doc() for k, r in self.after.items()},
            "benign": self.benign.to_doc(),
            "curve": self.curve,
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for stage, reports in (("before", self.before), ("after", self.after)):
            for key, rep in reports.items():
                rows.extend(rep.csv_rows(label=f"{stage}_{key}"))
        rows.extend(self.benign.csv_rows(label="benign"))
        return rows


def defend_finetune(victim: RecurrentPolicy, opponent: RecurrentPolicy,
                    env_spec: EnvSpec, trig: TriggerSpec, seed: int,
                    n_clean: int = 1000, epochs: int = 200, lr: float = 2e-4,
                    n_eval: int = 1000, workers: int = 1, log=None,
                    expert: Optional[RecurrentPolicy] = None) -> DefenseResult:
    """Fine-tune a suspected victim on clean winning-policy demonstrations
    and measure the backdoor before and after.

    Clean demonstrations come from the same synthesis path with p_trg=0 and
    the expert (victim-side winner, defaulting to `opponent` for symmetric
    games) in both branches, which is exactly "normal episodes" of the
    winner playing the victim slot. Before/after evaluations share eval
    substreams so the comparison is seed-paired.
    """
    trig.validate_for(env_spec)
    expert = expert if expert is not None else opponent

    def ev(policy, mode, label, t=None):
        return evaluate(policy, opponent, env_spec, mode, n_eval,
                        derive_seed(seed, label), trig=t, workers=workers)

    before = {
        "triggered": ev(victim, EvalMode.TRIGGERED, "defense.eval.trig", trig),
        "clean": ev(victim, EvalMode.CLEAN, "defense.eval.clean"),
    }
    benign = ev(opponent, EvalMode.BENIGN_BASELINE, "defense.eval.benign")

    demos = synthesize(env_spec, expert, expert, replace(trig, p_trg=0.0),
                       n_clean, derive_seed(seed, "defense.demos"),
                       workers=workers, opponent=opponent)
    ft = victim.clone()
    ft.role = "victim_finetuned"
    cfg = BCConfig(epochs=epochs, lr=lr, minibatch_episodes=16,
                   eval_every=max(1, epochs // 4))
    res = bc_train(demos.episodes, cfg, derive_seed(seed, "defense.bc"),
                   init_policy=ft, log=log)

    after = {
        "triggered": ev(res.policy, EvalMode.TRIGGERED, "defense.eval.trig", trig),
        "clean": ev(res.policy, EvalMode.CLEAN, "defense.eval.clean"),
    }
    return DefenseResult(finetuned=res.policy, before=before, after=after,
                         benign=benign, curve=res.curve)


# ---------- hidden-state memory probe ----------

def _victim_obs_rollout(env_spec: EnvSpec, victim: RecurrentPolicy,
                        opp_actor, rng_v: Xoshiro256pp,
                        rng_o) -> np.ndarray:
    state = reset(env_spec)
    vic = PolicyActor(victim)
    vic.reset(rng_v)
    opp_actor.reset(rng_o)
    rows = []
    while state.outcome is Outcome.ONGOING:
        obs1 = observe(env_spec, state, 1)
        obs2 = observe(env_spec, state, 2)
        a2 = opp_actor.act(obs2, state.t)
        a1 = vic.act(obs1, state.t)
        rows.append(obs1)
        state, _, _ = step(env_spec, state, a1, a2)
    return np.asarray(rows)


def _open_loop_actions(policy: RecurrentPolicy, obs_seq: np.ndarray) -> np.ndarray:
    hidden = policy.initial_hidden(1)
    acts = []
    for obs in obs_seq:
        mean_pre, _, hidden = policy.step(obs[None, :], hidden)
        acts.append(np.tanh(mean_pre[0]))
    return np.asarray(acts)


def memory_divergence(victim: RecurrentPolicy, opponent: RecurrentPolicy,
                      env_spec: EnvSpec, trig: TriggerSpec, seed: int = 0,
                      horizon: int = 20) -> float:
    """Mean action distance the trigger memory causes after the trigger ends.

    Builds two observation sequences that are identical from the end of the
    trigger window onward: a clean rollout, and the same clean tail grafted
    onto a triggered prefix. Both are replayed open loop with deterministic
    actions, so any divergence over the `horizon` steps after the window is
    carried purely by the recurrent state.
    """
    trig = replace(trig, p_trg=1.0)
    trig.validate_for(env_spec)
    k = trig.start_step + trig.length
    need = k + horizon

    clean_obs = trig_obs = None
    for i in range(32):
        if clean_obs is None:
            seq = _victim_obs_rollout(env_spec, victim, PolicyActor(opponent),
                                      stream(seed, "memory.clean.victim", i),
                                      stream(seed, "memory.clean.opp", i))
            if len(seq) >= need:
                clean_obs = seq
        if trig_obs is None:
            seq = _victim_obs_rollout(env_spec, victim, Adversary(opponent, trig),
                                      stream(seed, "memory.trig.victim", i),
                                      stream(seed, "memory.trig.opp", i))
            if len(seq) >= k:
                trig_obs = seq
        if clean_obs is not None and trig_obs is not None:
            break
    if clean_obs is None or trig_obs is None:
        raise NumericError("memory probe could not collect long enough rollouts")

    base = clean_obs[:need]
    spliced = np.concatenate([trig_obs[:k], clean_obs[k:need]])
    acts_a = _open_loop_actions(victim, base)
    acts_b = _open_loop_actions(victim, spliced)
    dist = np.linalg.norm(acts_a[k:need] - acts_b[k:need], axis=1)
    return float(np.mean(dist))


# ---------- report files ----------

def write_report(report, base_path: str) -> str:
    """Write `<base>.json` and `<base>.csv` for any report object exposing
    to_doc() / csv_rows(). Returns the JSON path."""
    base = base_path[:-5] if base_path.endswith(".json") else base_path
    doc = report.to_doc() if hasattr(report, "to_doc") else dict(report)
    json_path = base + ".json"
    tmp = json_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, json_path)

    rows = report.csv_rows() if hasattr(report, "csv_rows") else []
    if rows:
        csv_path = base + ".csv"
        tmp = csv_path + ".tmp"
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in _CSV_FIELDS})
        os.replace(tmp, csv_path)
    return json_path


def read_report(path: str) -> dict:
    if not os.path.exists(path):
        raise MissingArtifactError(f"report not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"corrupt report {path}: {exc}") from exc
