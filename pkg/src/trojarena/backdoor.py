"""Trigger patterns, the triggering opponent, and poisoned-trajectory
synthesis.

The opponent-side state machine ("adversary") decides once per episode,
at reset, whether this episode is poisoned. On a poisoned episode it emits
the trigger action sequence exactly once starting at `start_step`, then
resumes its winning policy. The winning policy's hidden state is advanced
on every step either way, so play after the trigger window is coherent.

The victim side used for synthesis is a hard mixture: it runs both the
winning and the fast-failing policy forward every step (two hidden states)
and acts from whichever branch the opponent's latch selects. Executed
actions are sampled; recorded supervision targets are the active branch's
deterministic tanh-squashed mean. On clean episodes the mixture consumes
randomness exactly like a plain winning-policy actor, which keeps clean
trajectories bit-identical to ordinary rollouts -- a tested invariant.

Datasets are JSON Lines: one header object with provenance, then one
object per episode. Observations deliberately carry no poisoned/trigger
flag; that information lives only in episode metadata.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .engine import Action, EnvSpec, GameKind, Outcome, observe, outcome_for, reset, step
from .errors import ConfigError, MissingArtifactError, NumericError
from .policy import ActMode, RecurrentPolicy
from .rng import Xoshiro256pp, stream
from .rollout import to_action

DATASET_VERSION = 1


class TriggerPattern(str, Enum):
    STILL = "still"
    SHIFT_LATERAL = "shift_lateral"
    OSCILLATE = "oscillate"


@dataclass(frozen=True)
class TriggerSpec:
    pattern: TriggerPattern = TriggerPattern.STILL
    length: int = 10
    start_step: int = 0
    p_trg: float = 0.3

    def __post_init__(self):
        if not isinstance(self.pattern, TriggerPattern):
            object.__setattr__(self, "pattern", TriggerPattern(self.pattern))
        if self.length < 1:
            raise ConfigError(f"trigger length must be >= 1, got {self.length}")
        if self.start_step < 0:
            raise ConfigError(f"trigger start_step must be >= 0, got {self.start_step}")
        if not 0.0 <= self.p_trg <= 1.0:
            raise ConfigError(f"p_trg must lie in [0, 1], got {self.p_trg}")

    def validate_for(self, spec: EnvSpec) -> None:
        if self.start_step + self.length >= spec.t_max:
            raise ConfigError(
                f"trigger window [{self.start_step}, {self.start_step + self.length}) "
                f"does not fit in an episode of t_max={spec.t_max}")

    def to_doc(self) -> dict:
        return {"pattern": self.pattern.value, "length": self.length,
                "start_step": self.start_step, "p_trg": self.p_trg}

    @classmethod
    def from_doc(cls, doc: dict) -> "TriggerSpec":
        return cls(pattern=TriggerPattern(doc["pattern"]), length=int(doc["length"]),
                   start_step=int(doc["start_step"]), p_trg=float(doc["p_trg"]))


def default_start_step(kind: GameKind) -> int:
    """Sumo rounds open with a forced stand-off, so triggering there waits
    until play has developed."""
    return 20 if kind is GameKind.SUMO else 0


def trigger_action(trig: TriggerSpec, cnt: int) -> Action:
    """The cnt-th action of the trigger sequence (cnt counts from 0)."""
    if not 0 <= cnt < trig.length:
        raise ConfigError(f"trigger index {cnt} outside [0, {trig.length})")
    p = trig.pattern
    if p is TriggerPattern.STILL:
        return Action(0.0, 0.0, 0.0)
    if p is TriggerPattern.SHIFT_LATERAL:
        return Action(0.0, -0.5, 0.6)
    # oscillate: alternate lateral thrust, keep balance
    return Action(0.0, 0.4 * (-1.0) ** cnt, 0.6)


# ---------- adversary state machine ----------

@dataclass(frozen=True)
class AdversaryState:
    flag: bool = False       # currently emitting the trigger
    cnt: int = 0             # trigger actions emitted so far in this burst
    poisoned: bool = False   # sampled once per episode at reset
    shown: bool = False      # trigger already completed this episode


def adversary_step(win_action, trig: TriggerSpec, state: AdversaryState,
                   obs: np.ndarray, t: int) -> tuple[Action, AdversaryState]:
    """Pure transition of the triggering opponent.

    `win_action(obs) -> Action` is only invoked on steps where the winning
    policy actually drives, so callers can hang rng consumption off it.
    """
    if (not state.flag and state.poisoned and not state.shown
            and t >= trig.start_step):
        return trigger_action(trig, 0), replace(state, flag=True, cnt=1)
    if state.flag and state.cnt < trig.length:
        return trigger_action(trig, state.cnt), replace(state, cnt=state.cnt + 1)
    if state.flag:  # cnt == length: burst complete, hand back to the winner
        return win_action(obs), replace(state, flag=False, cnt=0, shown=True)
    return win_action(obs), state


class Adversary:
    """Episode actor for the triggering opponent.

    The wrapped winning policy's hidden state advances every step; the rng
    is consumed only on steps where the winner's action is actually used,
    plus the single poisoned/clean draw at reset.
    """

    def __init__(self, win_policy: RecurrentPolicy, trig: TriggerSpec):
        self.policy = win_policy
        self.trig = trig
        self.state = AdversaryState()
        self.trigger_started_at: Optional[int] = None
        self._hidden = None
        self._rng: Optional[Xoshiro256pp] = None

    @property
    def latched(self) -> bool:
        """True from the step the trigger starts, for the rest of the episode."""
        return self.state.flag or self.state.shown

    def reset(self, rng: Xoshiro256pp) -> None:
        self._hidden = self.policy.initial_hidden(1)
        self._rng = rng
        poisoned = rng.uniform() < self.trig.p_trg
        self.state = AdversaryState(poisoned=poisoned)
        self.trigger_started_at = None

    def act(self, obs: np.ndarray, t: int, latched: bool = False) -> Action:
        del latched
        mean_pre, _, self._hidden = self.policy.step(obs[None, :], self._hidden)
        log_std = self.policy.log_std_clamped()

        def win_action(_obs) -> Action:
            raw = mean_pre[0] + np.exp(log_std) * self._rng.normal(self.policy.act_dim)
            return to_action(np.clip(np.tanh(raw), -1.0, 1.0))

        action, new_state = adversary_step(win_action, self.trig, self.state, obs, t)
        if new_state.flag and not self.state.flag:
            self.trigger_started_at = t
        self.state = new_state
        return action


# ---------- hard-coded mixture victim ----------

class HardcodedVictim:
    """Acts from the fail policy once the opponent's trigger has started,
    and from the winning policy otherwise. Both hidden states advance every
    step regardless of the active branch."""

    def __init__(self, win_policy: RecurrentPolicy, fail_policy: RecurrentPolicy):
        self.win = win_policy
        self.fail = fail_policy
        self.targets: list[np.ndarray] = []
        self._hw = None
        self._hf = None
        self._rng: Optional[Xoshiro256pp] = None

    def reset(self, rng: Xoshiro256pp) -> None:
        self._hw = self.win.initial_hidden(1)
        self._hf = self.fail.initial_hidden(1)
        self._rng = rng
        self.targets = []

    def act(self, obs: np.ndarray, t: int, latched: bool = False) -> Action:
        del t
        mean_w, _, self._hw = self.win.step(obs[None, :], self._hw)
        mean_f, _, self._hf = self.fail.step(obs[None, :], self._hf)
        branch = self.fail if latched else self.win
        mean = (mean_f if latched else mean_w)[0]
        raw = mean + np.exp(branch.log_std_clamped()) * self._rng.normal(branch.act_dim)
        self.targets.append(np.tanh(mean))
        return to_action(np.clip(np.tanh(raw), -1.0, 1.0))


# ---------- episodes and datasets ----------

@dataclass
class Episode:
    obs: np.ndarray          # (T, obs_dim) victim-side observations
    actions: np.ndarray      # (T, act_dim) supervision targets in [-1, 1]
    poisoned: bool
    trig_t: Optional[int]    # step the trigger started, None on clean episodes
    outcome: str             # W/L/T from the victim's perspective
    seed: int                # episode substream index

    def __post_init__(self):
        if len(self.obs) != len(self.actions):
            raise ConfigError("episode obs/actions length mismatch")


@dataclass
class Dataset:
    episodes: list[Episode]
    provenance: dict

    def poisoned_fraction(self) -> float:
        if not self.episodes:
            return 0.0
        return sum(e.poisoned for e in self.episodes) / len(self.episodes)


def _synthesize_range(env_spec: EnvSpec, win: RecurrentPolicy, fail: RecurrentPolicy,
                      opponent: RecurrentPolicy, trig: TriggerSpec, seed: int,
                      lo: int, hi: int) -> list[Episode]:
    episodes = []
    for i in range(lo, hi):
        rng_v = stream(seed, "synth.victim", i)
        rng_a = stream(seed, "synth.adv", i)
        victim = HardcodedVictim(win, fail)
        adversary = Adversary(opponent, trig)

        state = reset(env_spec)
        victim.reset(rng_v)
        adversary.reset(rng_a)
        obs_rows = []
        while state.outcome is Outcome.ONGOING:
            obs1 = observe(env_spec, state, 1)
            obs2 = observe(env_spec, state, 2)
            a2 = adversary.act(obs2, state.t)
            a1 = victim.act(obs1, state.t, latched=adversary.latched)
            obs_rows.append(obs1)
            state, _, _ = step(env_spec, state, a1, a2)
        episodes.append(Episode(
            obs=np.asarray(obs_rows),
            actions=np.asarray(victim.targets),
            poisoned=adversary.state.poisoned,
            trig_t=adversary.trigger_started_at,
            outcome=outcome_for(state.outcome, 1),
            seed=i,
        ))
    return episodes


def synthesize(env_spec: EnvSpec, win: RecurrentPolicy, fail: RecurrentPolicy,
               trig: TriggerSpec, n: int, seed: int, workers: int = 1,
               opponent: Optional[RecurrentPolicy] = None) -> Dataset:
    """Generate n victim-side episodes of the hard-coded mixture playing
    against the triggering opponent.

    `opponent` is the policy the adversary wraps; it defaults to `win`,
    which is right for symmetric games but not for runner/blocker ones.
    """
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    trig.validate_for(env_spec)
    opp = opponent if opponent is not None else win
    if workers > 1:
        chunk = (n + workers - 1) // workers
        bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
        episodes = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_synthesize_range, env_spec, win, fail, opp,
                                   trig, seed, lo, hi) for lo, hi in bounds]
            for fut in futures:  # submission order == index order
                episodes.extend(fut.result())
    else:
        episodes = _synthesize_range(env_spec, win, fail, opp, trig, seed, 0, n)

    ds = Dataset(episodes=episodes, provenance={
        "env": env_spec.kind.value,
        "policies": {"win_hash": win.digest(), "fail_hash": fail.digest(),
                     "opponent_hash": opp.digest()},
        "trigger": trig.to_doc(),
        "seed": seed,
        "n": n,
    })
    frac = ds.poisoned_fraction()
    if n >= 500 and abs(frac - trig.p_trg) > 0.05:
        raise NumericError(
            f"poisoned fraction {frac:.3f} is implausibly far from p_trg={trig.p_trg}")
    return ds


def save_dataset(ds: Dataset, path: str) -> None:
    header = {"version": DATASET_VERSION, **ds.provenance}
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for ep in ds.episodes:
            fh.write(json.dumps({
                "poisoned": ep.poisoned,
                "trig_t": ep.trig_t,
                "outcome": ep.outcome,
                "seed": ep.seed,
                "steps": [[o.tolist(), a.tolist()]
                          for o, a in zip(ep.obs, ep.actions)],
            }) + "\n")
    os.replace(tmp, path)


def load_dataset(path: str) -> Dataset:
    if not os.path.exists(path):
        raise MissingArtifactError(f"dataset not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"corrupt dataset header in {path}: {exc}") from exc
        if header.get("version") != DATASET_VERSION:
            raise ConfigError(f"unsupported dataset version {header.get('version')!r}")
        episodes = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                steps = doc["steps"]
                obs = np.asarray([s[0] for s in steps], dtype=np.float64)
                actions = np.asarray([s[1] for s in steps], dtype=np.float64)
                episodes.append(Episode(
                    obs=obs, actions=actions,
                    poisoned=bool(doc["poisoned"]),
                    trig_t=doc["trig_t"],
                    outcome=doc["outcome"],
                    seed=int(doc["seed"]),
                ))
            except (json.JSONDecodeError, KeyError, IndexError) as exc:
                raise ConfigError(f"corrupt dataset line {lineno} in {path}: {exc}") from exc
    provenance = {k: v for k, v in header.items() if k != "version"}
    return Dataset(episodes=episodes, provenance=provenance)


def dataset_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
