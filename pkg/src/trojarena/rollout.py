"""Episode runners shared by training, synthesis, and evaluation.

Actors follow a small duck-typed protocol:

    actor.reset(rng)            -- new episode; rng is the actor's substream
    actor.act(obs, t, latched)  -- engine Action for this step

`latched` tells a victim-side actor whether the opponent has started its
trigger sequence at or before this step; plain actors ignore it. Opponent
actors that can trigger expose `.latched`.

Each side of an episode owns an independent rng substream, so the order the
two sides are evaluated in does not affect reproducibility, and episodes
can be farmed out to workers and merged by index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import (
    Action,
    EnvSpec,
    Outcome,
    dummy_policy,
    observe,
    outcome_for,
    reset,
    step,
)
from .policy import ActMode, RecurrentPolicy
from .rng import Xoshiro256pp


def to_action(arr: np.ndarray) -> Action:
    return Action(float(arr[0]), float(arr[1]), float(arr[2]))


class PolicyActor:
    """Wraps a RecurrentPolicy as an episode actor.

    With record_targets=True the actor stores the deterministic
    (tanh-squashed) action mean at every visited state, which is what the
    cloning stages use as supervision.
    """

    def __init__(self, policy: RecurrentPolicy, mode: ActMode = ActMode.STOCHASTIC,
                 record_targets: bool = False):
        self.policy = policy
        self.mode = mode
        self.record_targets = record_targets
        self.targets: list[np.ndarray] = []
        self._hidden = None
        self._rng: Optional[Xoshiro256pp] = None

    def reset(self, rng: Optional[Xoshiro256pp]) -> None:
        self._hidden = self.policy.initial_hidden(1)
        self._rng = rng
        self.targets = []

    def act(self, obs: np.ndarray, t: int, latched: bool = False) -> Action:
        del t, latched
        res = self.policy.act(obs, self._hidden, self.mode, self._rng)
        self._hidden = res.hidden
        if self.record_targets:
            self.targets.append(np.tanh(res.mean))
        return to_action(res.action)


class DummyActor:
    """Scripted stand-still baseline."""

    def reset(self, rng) -> None:
        del rng

    def act(self, obs: np.ndarray, t: int, latched: bool = False) -> Action:
        del t, latched
        return dummy_policy(obs)


@dataclass
class Playback:
    outcome: Outcome
    length: int
    victim_outcome: str            # W/L/T from agent 1's perspective
    victim_fall_step: Optional[int]
    reward_1: float
    reward_2: float

    def steps_to_fail(self, t_max: int) -> int:
        """Step at which agent 1 fell or lost; t_max if it never did."""
        if self.victim_fall_step is not None:
            return self.victim_fall_step
        if self.victim_outcome == "L":
            return self.length
        return t_max


def play_episode(spec: EnvSpec, victim_actor, opponent_actor,
                 rng_victim: Optional[Xoshiro256pp],
                 rng_opponent: Optional[Xoshiro256pp]) -> Playback:
    """Run one episode to termination. Agent 1 is the victim side."""
    state = reset(spec)
    victim_actor.reset(rng_victim)
    opponent_actor.reset(rng_opponent)
    total1 = total2 = 0.0
    fall_step = None
    while state.outcome is Outcome.ONGOING:
        obs1 = observe(spec, state, 1)
        obs2 = observe(spec, state, 2)
        a2 = opponent_actor.act(obs2, state.t)
        latched = bool(getattr(opponent_actor, "latched", False))
        a1 = victim_actor.act(obs1, state.t, latched=latched)
        state, r1, r2 = step(spec, state, a1, a2)
        total1 += r1
        total2 += r2
        if fall_step is None and state.a1.fallen:
            fall_step = state.t
    return Playback(
        outcome=state.outcome,
        length=state.t,
        victim_outcome=outcome_for(state.outcome, 1),
        victim_fall_step=fall_step,
        reward_1=total1,
        reward_2=total2,
    )


def collect_training_episode(spec: EnvSpec, learner: RecurrentPolicy,
                             opponent_actor, rng_learner: Xoshiro256pp,
                             rng_opponent: Optional[Xoshiro256pp],
                             learner_side: int = 1) -> dict:
    """Roll one stochastic episode keeping everything a PPO update needs.

    Returns per-step arrays for the learner's side only; the opponent is a
    frozen actor. Rewards are the raw shaped rewards (callers may transform
    them before computing advantages).
    """
    state = reset(spec)
    opponent_actor.reset(rng_opponent)
    hidden = learner.initial_hidden(1)
    other = 2 if learner_side == 1 else 1
    obs_l, raws, logps, vals, rews = [], [], [], [], []
    fall_step = None
    while state.outcome is Outcome.ONGOING:
        ob_l = observe(spec, state, learner_side)
        ob_o = observe(spec, state, other)
        res = learner.act(ob_l, hidden, ActMode.STOCHASTIC, rng_learner)
        hidden = res.hidden
        a_l = to_action(res.action)
        a_o = opponent_actor.act(ob_o, state.t)
        if learner_side == 1:
            state, r_l, _ = step(spec, state, a_l, a_o)
        else:
            state, _, r_l = step(spec, state, a_o, a_l)
        obs_l.append(ob_l)
        raws.append(res.raw)
        logps.append(res.logprob)
        vals.append(res.value)
        rews.append(r_l)
        if fall_step is None and (state.a1 if learner_side == 1 else state.a2).fallen:
            fall_step = state.t
    return {
        "obs": np.asarray(obs_l),
        "raw": np.asarray(raws),
        "logp": np.asarray(logps, dtype=np.float64),
        "val": np.asarray(vals, dtype=np.float64),
        "rew": np.asarray(rews, dtype=np.float64),
        "length": state.t,
        "outcome": outcome_for(state.outcome, learner_side),
        "fall_step": fall_step,
    }


def pad_episodes(obs_list: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length (T_i, D) arrays into (B, T_max, D) plus a
    (B, T_max) validity mask."""
    b = len(obs_list)
    t_max = max(o.shape[0] for o in obs_list)
    d = obs_list[0].shape[1]
    out = np.zeros((b, t_max, d))
    mask = np.zeros((b, t_max))
    for i, o in enumerate(obs_list):
        out[i, : o.shape[0], :] = o
        mask[i, : o.shape[0]] = 1.0
    return out, mask
