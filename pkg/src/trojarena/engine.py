"""Two-player point-mass arena games.

Coordinate frame: x runs along the line between the start positions, y is
lateral. Agent 1 starts at (-start_offset, 0) and agent 2 at
(+start_offset, 0). Observations for agent 2 mirror the x axis so both
agents see their objective in the +x direction and one policy can play
either side of a symmetric game.

Dynamics are deterministic -- all stochasticity lives in the policies.
`GameState` is a value and `step` is a pure function, so rollouts can share
states freely across threads/processes.

Balance mechanics: every step costs k_upkeep stability plus k_effort per
squared thrust unit; putting weight on the balance channel regenerates
k_balance per unit; contact drains k_contact per unit of closing speed.
An agent whose stability reaches 0 has fallen and is frozen in place.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import NamedTuple

import numpy as np

from .errors import ConfigError

OBS_DIM = 11

# Snap tiny residuals to zero so an accumulated k_upkeep decay reaches the
# fallen state on the exact step 1/k_upkeep (float roundoff is ~1e-16).
_FALL_EPS = 1e-9


class GameKind(str, Enum):
    RUN_TO_GOAL = "run_to_goal"
    YOU_SHALL_NOT_PASS = "you_shall_not_pass"
    SUMO = "sumo"


class Outcome(str, Enum):
    ONGOING = "ongoing"
    WIN_1 = "win_1"
    WIN_2 = "win_2"
    TIE = "tie"


class Vec2(NamedTuple):
    x: float
    y: float


class Action(NamedTuple):
    thrust_x: float
    thrust_y: float
    balance: float


ZERO_ACTION = Action(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class EnvSpec:
    """Game selection plus every physical constant of the simulation."""

    kind: GameKind = GameKind.RUN_TO_GOAL
    half_length: float = 5.0      # goal lines at x = +/- half_length
    arena_radius: float = 3.0     # sumo ring radius
    start_offset: float = 2.5     # agents start at x = -/+ start_offset
    dt: float = 0.1
    t_max: int = 300
    drag: float = 0.05
    thrust_scale: float = 1.0
    agent_radius: float = 0.3
    k_upkeep: float = 0.004
    k_effort: float = 0.01
    k_balance: float = 0.006
    k_contact: float = 0.05
    progress_weight: float = 1.0
    alive_bonus: float = 0.01
    terminal_reward: float = 10.0
    sumo_requires_contact: bool = True

    def __post_init__(self):
        if not isinstance(self.kind, GameKind):
            object.__setattr__(self, "kind", GameKind(self.kind))
        if self.dt <= 0.0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.agent_radius <= 0.0:
            raise ConfigError(f"agent_radius must be positive, got {self.agent_radius}")
        if self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")
        if not 0.0 <= self.drag < 1.0:
            raise ConfigError(f"drag must lie in [0, 1), got {self.drag}")
        if self.half_length <= 0.0 or self.arena_radius <= 0.0:
            raise ConfigError("arena dimensions must be positive")
        if self.start_offset <= 0.0:
            raise ConfigError("start_offset must be positive")
        if self.kind is GameKind.SUMO and self.start_offset >= self.arena_radius:
            raise ConfigError("sumo agents must start inside the ring")
        for name in ("k_upkeep", "k_effort", "k_balance", "k_contact", "thrust_scale"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass(frozen=True)
class AgentBody:
    pos: Vec2
    vel: Vec2
    stability: float
    fallen: bool = False
    touched_opponent: bool = False


@dataclass(frozen=True)
class GameState:
    a1: AgentBody
    a2: AgentBody
    t: int = 0
    outcome: Outcome = Outcome.ONGOING


def reset(spec: EnvSpec, seed: int = 0) -> GameState:
    """Mirrored start state. Deterministic; `seed` is accepted for interface
    symmetry with the policies but does not influence the state."""
    del seed
    a1 = AgentBody(Vec2(-spec.start_offset, 0.0), Vec2(0.0, 0.0), 1.0)
    a2 = AgentBody(Vec2(+spec.start_offset, 0.0), Vec2(0.0, 0.0), 1.0)
    return GameState(a1=a1, a2=a2)


def _clamp(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def clamp_action(a: Action) -> Action:
    return Action(
        _clamp(a.thrust_x, -1.0, 1.0),
        _clamp(a.thrust_y, -1.0, 1.0),
        _clamp(a.balance, -1.0, 1.0),
    )


def _integrate(spec: EnvSpec, body: AgentBody, act: Action) -> AgentBody:
    if body.fallen:
        return body  # fallen agents are frozen
    keep = 1.0 - spec.drag
    vx = (body.vel.x + spec.dt * spec.thrust_scale * act.thrust_x) * keep
    vy = (body.vel.y + spec.dt * spec.thrust_scale * act.thrust_y) * keep
    return replace(
        body,
        vel=Vec2(vx, vy),
        pos=Vec2(body.pos.x + spec.dt * vx, body.pos.y + spec.dt * vy),
    )


def _resolve_contact(
    spec: EnvSpec, b1: AgentBody, b2: AgentBody
) -> tuple[AgentBody, AgentBody, float]:
    """Circle overlap: equal-and-opposite elastic impulse along the center
    line plus positional separation. Returns the shared stability drain."""
    dx = b1.pos.x - b2.pos.x
    dy = b1.pos.y - b2.pos.y
    dist = math.hypot(dx, dy)
    min_dist = 2.0 * spec.agent_radius
    if dist >= min_dist or (b1.fallen and b2.fallen):
        return b1, b2, 0.0
    if dist > 0.0:
        nx, ny = dx / dist, dy / dist
    else:
        nx, ny = 1.0, 0.0  # exactly coincident centers: arbitrary fixed axis

    rvx = b1.vel.x - b2.vel.x
    rvy = b1.vel.y - b2.vel.y
    drain = spec.k_contact * math.hypot(rvx, rvy)
    overlap = min_dist - dist
    closing = rvx * nx + rvy * ny  # negative when approaching

    if not b1.fallen and not b2.fallen:
        half = 0.5 * overlap
        p1 = Vec2(b1.pos.x + nx * half, b1.pos.y + ny * half)
        p2 = Vec2(b2.pos.x - nx * half, b2.pos.y - ny * half)
        v1, v2 = b1.vel, b2.vel
        if closing < 0.0:
            # equal masses: exchange the normal velocity components
            vn1 = v1.x * nx + v1.y * ny
            vn2 = v2.x * nx + v2.y * ny
            v1 = Vec2(v1.x + (vn2 - vn1) * nx, v1.y + (vn2 - vn1) * ny)
            v2 = Vec2(v2.x + (vn1 - vn2) * nx, v2.y + (vn1 - vn2) * ny)
        b1 = replace(b1, pos=p1, vel=v1, touched_opponent=True)
        b2 = replace(b2, pos=p2, vel=v2, touched_opponent=True)
    elif b2.fallen:
        # bounce off a frozen body: full separation, reflect normal velocity
        p1 = Vec2(b1.pos.x + nx * overlap, b1.pos.y + ny * overlap)
        v1 = b1.vel
        vn1 = v1.x * nx + v1.y * ny
        if vn1 < 0.0:
            v1 = Vec2(v1.x - 2.0 * vn1 * nx, v1.y - 2.0 * vn1 * ny)
        b1 = replace(b1, pos=p1, vel=v1, touched_opponent=True)
        b2 = replace(b2, touched_opponent=True)
    else:  # b1 fallen, b2 live; n points from 2 toward 1
        p2 = Vec2(b2.pos.x - nx * overlap, b2.pos.y - ny * overlap)
        v2 = b2.vel
        vn = v2.x * nx + v2.y * ny
        if vn > 0.0:  # moving toward the frozen body
            v2 = Vec2(v2.x - 2.0 * vn * nx, v2.y - 2.0 * vn * ny)
        b2 = replace(b2, pos=p2, vel=v2, touched_opponent=True)
        b1 = replace(b1, touched_opponent=True)
    return b1, b2, drain


def _update_stability(
    spec: EnvSpec, body: AgentBody, act: Action, contact_drain: float
) -> AgentBody:
    if body.fallen:
        return body
    effort = act.thrust_x * act.thrust_x + act.thrust_y * act.thrust_y
    s = (
        body.stability
        - spec.k_upkeep
        - spec.k_effort * effort
        + spec.k_balance * max(act.balance, 0.0)
        - contact_drain
    )
    s = _clamp(s, 0.0, 1.0)
    if s <= _FALL_EPS:
        return replace(body, stability=0.0, fallen=True)
    return replace(body, stability=s)


def _outcome(spec: EnvSpec, a1: AgentBody, a2: AgentBody, t: int) -> Outcome:
    kind = spec.kind
    if kind is GameKind.RUN_TO_GOAL:
        win1 = a1.pos.x >= spec.half_length or a2.fallen
        win2 = a2.pos.x <= -spec.half_length or a1.fallen
        if win1 and win2:
            return Outcome.TIE
        if win1:
            return Outcome.WIN_1
        if win2:
            return Outcome.WIN_2
        return Outcome.TIE if t >= spec.t_max else Outcome.ONGOING

    if kind is GameKind.YOU_SHALL_NOT_PASS:
        # agent 1 is the runner, agent 2 the blocker; a fallen blocker does
        # not end the game and there are no ties
        if a1.pos.x >= spec.half_length:
            return Outcome.WIN_1
        if a1.fallen or t >= spec.t_max:
            return Outcome.WIN_2
        return Outcome.ONGOING

    # sumo
    out1 = a1.fallen or math.hypot(a1.pos.x, a1.pos.y) > spec.arena_radius
    out2 = a2.fallen or math.hypot(a2.pos.x, a2.pos.y) > spec.arena_radius
    if out1 and out2:
        return Outcome.TIE
    if out1:
        if spec.sumo_requires_contact and not a2.touched_opponent:
            return Outcome.TIE  # fell before any contact
        return Outcome.WIN_2
    if out2:
        if spec.sumo_requires_contact and not a1.touched_opponent:
            return Outcome.TIE
        return Outcome.WIN_1
    return Outcome.TIE if t >= spec.t_max else Outcome.ONGOING


def _progress(spec: EnvSpec, before: GameState, a1: AgentBody, a2: AgentBody) -> tuple[float, float]:
    kind = spec.kind
    if kind is GameKind.RUN_TO_GOAL:
        return (a1.pos.x - before.a1.pos.x, -(a2.pos.x - before.a2.pos.x))
    if kind is GameKind.YOU_SHALL_NOT_PASS:
        adv = a1.pos.x - before.a1.pos.x  # blocker is paid for holding the runner back
        return (adv, -adv)
    # sumo: push the opponent outward, stay central yourself
    r1_old = math.hypot(before.a1.pos.x, before.a1.pos.y)
    r2_old = math.hypot(before.a2.pos.x, before.a2.pos.y)
    r1_new = math.hypot(a1.pos.x, a1.pos.y)
    r2_new = math.hypot(a2.pos.x, a2.pos.y)
    return ((r2_new - r2_old) - (r1_new - r1_old), (r1_new - r1_old) - (r2_new - r2_old))


def step(
    spec: EnvSpec, state: GameState, act1: Action, act2: Action
) -> tuple[GameState, float, float]:
    """Advance one tick. Returns (new_state, reward_1, reward_2)."""
    if state.outcome is not Outcome.ONGOING:
        raise RuntimeError("step() called on a terminal state")
    act1 = clamp_action(act1)
    act2 = clamp_action(act2)
    # actions are expressed in each agent's own frame; agent 2 faces -x in
    # world coordinates, matching its mirrored observations
    act2 = Action(-act2.thrust_x, act2.thrust_y, act2.balance)

    a1 = _integrate(spec, state.a1, act1)
    a2 = _integrate(spec, state.a2, act2)
    a1, a2, contact_drain = _resolve_contact(spec, a1, a2)
    a1 = _update_stability(spec, a1, act1, contact_drain)
    a2 = _update_stability(spec, a2, act2, contact_drain)

    t = state.t + 1
    outcome = _outcome(spec, a1, a2, t)
    new_state = GameState(a1=a1, a2=a2, t=t, outcome=outcome)

    pr1, pr2 = _progress(spec, state, a1, a2)
    r1 = spec.progress_weight * pr1 + (spec.alive_bonus if not a1.fallen else 0.0)
    r2 = spec.progress_weight * pr2 + (spec.alive_bonus if not a2.fallen else 0.0)
    if outcome is Outcome.WIN_1:
        r1 += spec.terminal_reward
        r2 -= spec.terminal_reward
    elif outcome is Outcome.WIN_2:
        r1 -= spec.terminal_reward
        r2 += spec.terminal_reward
    return new_state, r1, r2


def _objective_distance(spec: EnvSpec, state: GameState, agent: int) -> float:
    kind = spec.kind
    me = state.a1 if agent == 1 else state.a2
    if kind is GameKind.SUMO:
        return spec.arena_radius - math.hypot(me.pos.x, me.pos.y)
    mirror = 1.0 if agent == 1 else -1.0
    if kind is GameKind.RUN_TO_GOAL:
        return spec.half_length - mirror * me.pos.x
    # you-shall-not-pass: the runner closes on +L; the blocker's defended
    # line sits behind it in its mirrored frame, so the gap is signed
    if agent == 1:
        return spec.half_length - me.pos.x
    return me.pos.x - spec.half_length


def observe(spec: EnvSpec, state: GameState, agent: int) -> np.ndarray:
    """11-dim observation; frame is mirrored in x for agent 2.

    Layout: own pos (2), own vel (2), own stability (1), opponent pos and
    vel relative to self (4), signed distance to own objective (1),
    t / t_max (1). Deliberately contains no trigger or episode flags.
    """
    if agent == 1:
        me, opp, m = state.a1, state.a2, 1.0
    elif agent == 2:
        me, opp, m = state.a2, state.a1, -1.0
    else:
        raise ValueError(f"agent must be 1 or 2, got {agent}")
    return np.array(
        [
            m * me.pos.x,
            me.pos.y,
            m * me.vel.x,
            me.vel.y,
            me.stability,
            m * (opp.pos.x - me.pos.x),
            opp.pos.y - me.pos.y,
            m * (opp.vel.x - me.vel.x),
            opp.vel.y - me.vel.y,
            _objective_distance(spec, state, agent),
            state.t / spec.t_max,
        ],
        dtype=np.float64,
    )


def dummy_policy(obs: np.ndarray) -> Action:
    """Scripted no-op baseline: stands still and never balances."""
    del obs
    return ZERO_ACTION


def outcome_for(outcome: Outcome, agent: int) -> str:
    """Map an outcome onto 'W'/'L'/'T' from one agent's perspective."""
    if outcome is Outcome.TIE:
        return "T"
    if outcome is Outcome.ONGOING:
        raise ValueError("episode still ongoing")
    won = (outcome is Outcome.WIN_1) == (agent == 1)
    return "W" if won else "L"
