"""Arena physics and rules: hand-computed kinematics/stability oracles,
outcome tables, mirror symmetry, and per-game outcome properties."""
import math
from dataclasses import replace

import numpy as np
import pytest

from trojarena.engine import (
    OBS_DIM,
    Action,
    AgentBody,
    EnvSpec,
    GameKind,
    Outcome,
    Vec2,
    clamp_action,
    dummy_policy,
    observe,
    outcome_for,
    reset,
    step,
)
from trojarena.errors import ConfigError
from trojarena.rng import stream

IDLE = Action(0.0, 0.0, 0.0)


def spec_for(kind=GameKind.RUN_TO_GOAL, **kw) -> EnvSpec:
    return EnvSpec(kind=kind, **kw)


def run_scripted(spec, act_fn_1, act_fn_2, max_steps=None):
    """Play scripted frame-local actions; returns (states, final_state)."""
    state = reset(spec)
    states = [state]
    limit = max_steps if max_steps is not None else spec.t_max + 1
    while state.outcome is Outcome.ONGOING and state.t < limit:
        state, _, _ = step(spec, state, act_fn_1(state.t), act_fn_2(state.t))
        states.append(state)
    return states, state


# ---------- constants and reset ----------

def test_default_constants():
    s = EnvSpec()
    assert (s.dt, s.t_max, s.drag) == (0.1, 300, 0.05)
    assert (s.half_length, s.arena_radius, s.start_offset) == (5.0, 3.0, 2.5)
    assert (s.agent_radius, s.thrust_scale) == (0.3, 1.0)
    assert (s.k_upkeep, s.k_effort, s.k_balance, s.k_contact) == (
        0.004, 0.01, 0.006, 0.05)
    assert (s.progress_weight, s.alive_bonus, s.terminal_reward) == (1.0, 0.01, 10.0)


def test_reset_state():
    s = spec_for()
    st = reset(s)
    assert st.a1.pos == Vec2(-2.5, 0.0) and st.a2.pos == Vec2(2.5, 0.0)
    assert st.a1.vel == Vec2(0.0, 0.0) and st.a2.vel == Vec2(0.0, 0.0)
    assert st.a1.stability == 1.0 and st.a2.stability == 1.0
    assert st.t == 0 and st.outcome is Outcome.ONGOING
    assert not st.a1.fallen and not st.a1.touched_opponent


def test_spec_validation():
    with pytest.raises(ConfigError):
        EnvSpec(dt=0.0)
    with pytest.raises(ConfigError):
        EnvSpec(drag=1.0)
    with pytest.raises(ConfigError):
        EnvSpec(t_max=0)
    with pytest.raises(ConfigError):
        EnvSpec(k_effort=-0.1)
    with pytest.raises(ConfigError):
        EnvSpec(kind=GameKind.SUMO, start_offset=3.5)  # outside the ring
    with pytest.raises(ValueError):
        EnvSpec(kind="not_a_game")


# ---------- kinematics ----------

def test_single_step_kinematics_hand_values():
    # One step of semi-implicit Euler with drag, computed by hand:
    # v' = (0 + 0.1 * 1.0) * 0.95 = 0.095, x' = -2.5 + 0.1 * 0.095.
    s = spec_for()
    st, _, _ = step(s, reset(s), Action(1.0, 0.0, 0.0), IDLE)
    assert st.a1.vel.x == pytest.approx(0.095, rel=1e-15)
    assert st.a1.pos.x == pytest.approx(-2.5 + 0.0095, rel=1e-15)
    assert st.a1.vel.y == 0.0 and st.a1.pos.y == 0.0
    assert st.a2.pos == Vec2(2.5, 0.0)  # idle opponent stays put


def test_sprint_matches_independent_recurrence_and_wins():
    # Recompute the full sprint trajectory with a standalone recurrence and
    # require the engine to match step for step until the goal line.
    s = spec_for()
    st0 = reset(s)
    st0 = replace(st0, a1=replace(st0.a1, pos=Vec2(-2.5, 1.0)))  # dodge lane
    sprint = Action(1.0, 0.0, 1.0)  # full balance offsets some effort drain

    vel, pos, t = 0.0, -2.5, 0
    state = st0
    while state.outcome is Outcome.ONGOING:
        state, _, _ = step(s, state, sprint, IDLE)
        vel = (vel + s.dt * s.thrust_scale * 1.0) * (1.0 - s.drag)
        pos = pos + s.dt * vel
        t += 1
        assert state.a1.vel.x == pytest.approx(vel, rel=1e-12)
        assert state.a1.pos.x == pytest.approx(pos, rel=1e-12)
        assert state.a1.pos.y == 1.0
        assert t < 200, "sprint failed to terminate the episode"
    assert state.outcome is Outcome.WIN_1
    assert state.a1.pos.x >= s.half_length
    assert not state.a1.fallen


def test_action_clamped_to_unit_cube():
    s = spec_for()
    a, b = reset(s), reset(s)
    sa, _, _ = step(s, a, Action(5.0, -9.0, 2.0), IDLE)
    sb, _, _ = step(s, b, Action(1.0, -1.0, 1.0), IDLE)
    assert sa.a1 == sb.a1
    assert clamp_action(Action(5.0, -9.0, 2.0)) == Action(1.0, -1.0, 1.0)


def test_agent2_thrust_is_frame_local():
    # +x thrust moves each agent toward its own objective, i.e. agent 2
    # moves in world -x.
    s = spec_for()
    st, _, _ = step(s, reset(s), IDLE, Action(1.0, 0.0, 0.0))
    assert st.a2.vel.x == pytest.approx(-0.095, rel=1e-15)
    assert st.a2.pos.x < 2.5


def test_fallen_agent_is_frozen():
    s = spec_for(kind=GameKind.YOU_SHALL_NOT_PASS)
    st = reset(s)
    st = replace(st, a2=replace(st.a2, stability=0.0, fallen=True))
    nxt, _, _ = step(s, st, IDLE, Action(1.0, 1.0, 1.0))
    assert nxt.a2.pos == st.a2.pos and nxt.a2.vel == st.a2.vel
    assert nxt.a2.fallen


# ---------- stability ----------

def test_stability_upkeep_single_idle_step():
    s = spec_for()
    st, _, _ = step(s, reset(s), IDLE, IDLE)
    assert st.a1.stability == pytest.approx(0.996, abs=1e-15)
    assert st.a2.stability == pytest.approx(0.996, abs=1e-15)


def test_stability_effort_and_balance_terms():
    s = spec_for()
    # effort |thrust|^2 = 1^2 + 1^2 = 2 and full balance:
    # 1 - 0.004 - 0.01*2 + 0.006 = 0.982
    st, _, _ = step(s, reset(s), Action(1.0, 1.0, 1.0), IDLE)
    assert st.a1.stability == pytest.approx(0.982, abs=1e-12)
    # negative balance gives no regeneration (and no extra drain)
    st2, _, _ = step(s, reset(s), Action(1.0, 1.0, -1.0), IDLE)
    assert st2.a1.stability == pytest.approx(0.976, abs=1e-12)


def test_stability_floor_causes_fall():
    s = spec_for()
    st = reset(s)
    st = replace(st, a1=replace(st.a1, stability=0.003))
    nxt, _, _ = step(s, st, IDLE, IDLE)
    assert nxt.a1.stability == 0.0
    assert nxt.a1.fallen


def test_stability_capped_at_one():
    s = spec_for()
    st, _, _ = step(s, reset(s), Action(0.0, 0.0, 1.0), IDLE)
    assert st.a1.stability == 1.0  # regen cannot exceed the cap


def test_dummy_falls_at_exactly_step_250():
    # 1 / k_upkeep = 250 idle steps from full stability.
    s = spec_for()
    states, final = run_scripted(s, lambda t: IDLE, lambda t: IDLE)
    assert final.outcome is Outcome.TIE
    assert final.t == 250
    assert final.a1.fallen and final.a2.fallen
    assert not states[249].a1.fallen


# ---------- contact ----------

def test_head_on_contact_hand_oracle():
    # Two agents gliding into each other with no thrust. Hand-computed:
    # velocities keep factor 0.95, positions overlap at |dx|=0.31 < 0.6,
    # elastic exchange flips the normal components, overlap is split
    # equally, and both lose k_contact * |v_rel| = 0.05 * 1.9 stability.
    s = spec_for()
    st = reset(s)
    st = replace(
        st,
        a1=replace(st.a1, pos=Vec2(-0.25, 0.0), vel=Vec2(1.0, 0.0)),
        a2=replace(st.a2, pos=Vec2(0.25, 0.0), vel=Vec2(-1.0, 0.0)),
    )
    nxt, _, _ = step(s, st, IDLE, IDLE)
    assert nxt.a1.vel.x == pytest.approx(-0.95, rel=1e-12)
    assert nxt.a2.vel.x == pytest.approx(0.95, rel=1e-12)
    assert nxt.a1.pos.x == pytest.approx(-0.30, rel=1e-12)
    assert nxt.a2.pos.x == pytest.approx(0.30, rel=1e-12)
    assert nxt.a1.stability == pytest.approx(1.0 - 0.004 - 0.05 * 1.9, rel=1e-12)
    assert nxt.a2.stability == nxt.a1.stability
    assert nxt.a1.touched_opponent and nxt.a2.touched_opponent


def test_no_contact_beyond_diameter():
    s = spec_for()
    st = reset(s)
    st = replace(
        st,
        a1=replace(st.a1, pos=Vec2(-0.35, 0.0)),
        a2=replace(st.a2, pos=Vec2(0.35, 0.0)),
    )
    nxt, _, _ = step(s, st, IDLE, IDLE)
    assert not nxt.a1.touched_opponent
    assert nxt.a1.stability == pytest.approx(0.996, abs=1e-15)


# ---------- rewards ----------

def test_progress_and_alive_reward_run_to_goal():
    s = spec_for()
    st, r1, r2 = step(s, reset(s), Action(1.0, 0.0, 0.0), IDLE)
    # agent 1 moved +0.0095 toward its goal; agent 2 did not move
    assert r1 == pytest.approx(1.0 * 0.0095 + 0.01, rel=1e-12)
    assert r2 == pytest.approx(0.01, rel=1e-12)


def test_terminal_reward_on_goal_crossing():
    s = spec_for()
    st = reset(s)
    st = replace(st, a1=replace(st.a1, pos=Vec2(4.99, 1.0), vel=Vec2(1.9, 0.0)))
    nxt, r1, r2 = step(s, st, Action(1.0, 0.0, 1.0), IDLE)
    assert nxt.outcome is Outcome.WIN_1
    dx = nxt.a1.pos.x - 4.99
    assert r1 == pytest.approx(dx + 0.01 + 10.0, rel=1e-9)
    assert r2 == pytest.approx(0.01 - 10.0, rel=1e-9)


def test_step_on_terminal_state_raises():
    s = spec_for()
    _, final = run_scripted(s, lambda t: IDLE, lambda t: IDLE)
    with pytest.raises(RuntimeError):
        step(s, final, IDLE, IDLE)


# ---------- observations ----------

def test_observation_layout_at_reset():
    s = spec_for()
    st = reset(s)
    o1 = observe(s, st, 1)
    assert o1.shape == (OBS_DIM,)
    # own pos, own vel, stability
    assert o1[0] == -2.5 and o1[1] == 0.0
    assert o1[2] == 0.0 and o1[3] == 0.0
    assert o1[4] == 1.0
    # opponent relative position: 5.0 ahead
    assert o1[5] == 5.0 and o1[6] == 0.0
    assert o1[7] == 0.0 and o1[8] == 0.0
    # signed objective distance and normalized time
    assert o1[9] == 7.5
    assert o1[10] == 0.0
    # the mirrored frame makes the start symmetric
    assert np.array_equal(o1, observe(s, st, 2))


def test_observation_time_channel():
    s = spec_for()
    st = reset(s)
    st = replace(st, t=150)
    assert observe(s, st, 1)[10] == 0.5


def test_observation_relative_velocity_against_still_opponent():
    s = spec_for()
    st, _, _ = step(s, reset(s), Action(1.0, 0.5, 0.0), IDLE)
    o1 = observe(s, st, 1)
    assert o1[7] == pytest.approx(-o1[2], rel=1e-15)
    assert o1[8] == pytest.approx(-o1[3], rel=1e-15)


def test_observation_mirror_consistency():
    # Agent 2's view of a mirrored world equals agent 1's view of the
    # original: swap bodies and negate x.
    s = spec_for()
    st = reset(s)
    st = replace(
        st,
        a1=replace(st.a1, pos=Vec2(-1.2, 0.4), vel=Vec2(0.3, -0.1), stability=0.8),
        a2=replace(st.a2, pos=Vec2(0.7, -0.2), vel=Vec2(-0.5, 0.2), stability=0.6),
        t=10,
    )
    mirrored = replace(
        st,
        a1=replace(st.a2, pos=Vec2(-0.7, -0.2), vel=Vec2(0.5, 0.2)),
        a2=replace(st.a1, pos=Vec2(1.2, 0.4), vel=Vec2(-0.3, -0.1)),
    )
    np.testing.assert_allclose(observe(s, st, 2), observe(s, mirrored, 1),
                               rtol=0, atol=1e-15)


def test_observation_rejects_bad_agent():
    s = spec_for()
    with pytest.raises(ValueError):
        observe(s, reset(s), 3)


def test_sumo_objective_distance_is_ring_margin():
    s = spec_for(kind=GameKind.SUMO, start_offset=1.5)
    st = reset(s)
    assert observe(s, st, 1)[9] == pytest.approx(3.0 - 1.5, rel=1e-15)


# ---------- outcomes per game ----------

def test_outcome_for_mapping():
    assert outcome_for(Outcome.WIN_1, 1) == "W"
    assert outcome_for(Outcome.WIN_1, 2) == "L"
    assert outcome_for(Outcome.WIN_2, 1) == "L"
    assert outcome_for(Outcome.WIN_2, 2) == "W"
    assert outcome_for(Outcome.TIE, 1) == "T"
    with pytest.raises(ValueError):
        outcome_for(Outcome.ONGOING, 1)


def test_run_to_goal_opponent_fall_is_a_win():
    s = spec_for()
    st = reset(s)
    st = replace(st, a2=replace(st.a2, stability=0.001))
    nxt, _, _ = step(s, st, IDLE, IDLE)
    assert nxt.a2.fallen
    assert nxt.outcome is Outcome.WIN_1


def test_ysnp_runner_fall_or_timeout_is_blocker_win():
    s = spec_for(kind=GameKind.YOU_SHALL_NOT_PASS)
    st = reset(s)
    st = replace(st, a1=replace(st.a1, stability=0.001))
    nxt, _, _ = step(s, st, IDLE, IDLE)
    assert nxt.outcome is Outcome.WIN_2  # runner down

    # timeout also goes to the blocker
    short = spec_for(kind=GameKind.YOU_SHALL_NOT_PASS, t_max=5)
    _, final = run_scripted(short, lambda t: Action(0.0, 0.0, 1.0),
                            lambda t: Action(0.0, 0.0, 1.0))
    assert final.t == 5 and final.outcome is Outcome.WIN_2


def test_ysnp_blocker_fall_does_not_end_the_game():
    s = spec_for(kind=GameKind.YOU_SHALL_NOT_PASS)
    st = reset(s)
    st = replace(st, a2=replace(st.a2, stability=0.001))
    nxt, _, _ = step(s, st, IDLE, IDLE)
    assert nxt.a2.fallen
    assert nxt.outcome is Outcome.ONGOING


def test_ysnp_never_ties_over_random_play():
    # Exhaustive stochastic sweep: with random frame-local actions on both
    # sides the game always produces a winner.
    s = spec_for(kind=GameKind.YOU_SHALL_NOT_PASS)
    outcomes = set()
    for i in range(10_000):
        rng = stream(2024, "ysnp.tie", i)

        def rand_action(_t):
            return Action(2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0,
                          2.0 * rng.uniform() - 1.0)

        _, final = run_scripted(s, rand_action, rand_action)
        outcomes.add(final.outcome)
    assert Outcome.TIE not in outcomes
    assert Outcome.ONGOING not in outcomes


def test_sumo_fall_without_contact_is_a_tie():
    s = spec_for(kind=GameKind.SUMO, start_offset=1.5)
    st = reset(s)
    st = replace(st, a1=replace(st.a1, stability=0.001))
    nxt, _, _ = step(s, st, IDLE, IDLE)
    assert nxt.a1.fallen
    assert nxt.outcome is Outcome.TIE


def test_sumo_ring_exit_without_contact_is_a_tie():
    s = spec_for(kind=GameKind.SUMO, start_offset=1.5)
    # agent 1 sprints backward out of the ring; never touches the opponent
    _, final = run_scripted(s, lambda t: Action(-1.0, 0.0, 1.0),
                            lambda t: Action(0.0, 0.0, 1.0))
    assert final.outcome is Outcome.TIE
    assert math.hypot(final.a1.pos.x, final.a1.pos.y) > s.arena_radius
    assert not final.a1.touched_opponent


def test_sumo_push_out_after_contact_loses():
    # agent 2 charges into an idle agent 1 and shoves it over the ring edge;
    # with contact established the exit is a loss, not a tie
    s = spec_for(kind=GameKind.SUMO, start_offset=1.5)
    _, final = run_scripted(s, lambda t: Action(0.0, 0.0, 1.0),
                            lambda t: Action(1.0, 0.0, 1.0))
    assert final.outcome is Outcome.WIN_2
    assert math.hypot(final.a1.pos.x, final.a1.pos.y) > s.arena_radius
    assert final.a2.touched_opponent and final.a1.touched_opponent
    assert final.t < 60  # decided quickly, not by attrition


def test_sumo_idle_runs_to_simultaneous_fall_tie():
    s = spec_for(kind=GameKind.SUMO, start_offset=1.5)
    _, final = run_scripted(s, lambda t: IDLE, lambda t: IDLE)
    assert final.outcome is Outcome.TIE
    assert final.t == 250


# ---------- mirror symmetry ----------

def test_swapping_agents_mirrors_the_whole_game():
    # Because actions are frame-local, swapping the two scripted action
    # sequences yields the x-mirrored game. For the symmetric games the
    # outcome swaps too; for the runner/blocker game only the physics is
    # mirror-symmetric (the rules are not), so there the check covers the
    # common prefix of the two trajectories.
    for kind in GameKind:
        s = spec_for(kind=kind, start_offset=1.5 if kind is GameKind.SUMO else 2.5)
        rng = stream(77, f"mirror.{kind.value}", 0)
        seq1 = [Action(2 * rng.uniform() - 1, 2 * rng.uniform() - 1,
                       2 * rng.uniform() - 1) for _ in range(s.t_max)]
        seq2 = [Action(2 * rng.uniform() - 1, 2 * rng.uniform() - 1,
                       2 * rng.uniform() - 1) for _ in range(s.t_max)]

        states_a, final_a = run_scripted(s, lambda t: seq1[t], lambda t: seq2[t])
        states_b, final_b = run_scripted(s, lambda t: seq2[t], lambda t: seq1[t])

        symmetric = kind is not GameKind.YOU_SHALL_NOT_PASS
        if symmetric:
            assert len(states_a) == len(states_b)
        for sa, sb in zip(states_a, states_b):
            assert sb.a1.pos.x == pytest.approx(-sa.a2.pos.x, abs=1e-12)
            assert sb.a1.pos.y == pytest.approx(sa.a2.pos.y, abs=1e-12)
            assert sb.a1.vel.x == pytest.approx(-sa.a2.vel.x, abs=1e-12)
            assert sb.a2.pos.x == pytest.approx(-sa.a1.pos.x, abs=1e-12)
            assert sb.a1.stability == pytest.approx(sa.a2.stability, abs=1e-12)
            assert sb.a2.stability == pytest.approx(sa.a1.stability, abs=1e-12)
        if symmetric:
            swap = {Outcome.WIN_1: Outcome.WIN_2, Outcome.WIN_2: Outcome.WIN_1,
                    Outcome.TIE: Outcome.TIE}
            assert final_b.outcome is swap[final_a.outcome]


def test_dummy_policy_is_identity_zero():
    assert dummy_policy(np.zeros(OBS_DIM)) == Action(0.0, 0.0, 0.0)
