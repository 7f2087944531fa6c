"""Evaluation statistics, report invariants, sweeps, defense, memory probe."""
import csv
import math

import numpy as np
import pytest

from trojarena.backdoor import TriggerPattern, TriggerSpec
from trojarena.bc import BCConfig
from trojarena.errors import ConfigError, MissingArtifactError
from trojarena.harness import (
    EvalMode,
    EvalReport,
    SweepReport,
    defend_finetune,
    evaluate,
    headline,
    memory_divergence,
    read_report,
    sweep_poisoning_rate,
    sweep_trigger_length,
    sweep_trigger_pattern,
    wilson_interval,
    write_report,
)

from conftest import short_env, small_policy


# ---------- Wilson intervals ----------

def test_wilson_hand_values():
    # k=3, n=10 by hand: center=(0.3+z^2/20)/(1+z^2/10), z=1.96
    lo, hi = wilson_interval(3, 10)
    assert lo == pytest.approx(0.1077892874, abs=1e-9)
    assert hi == pytest.approx(0.6032267800, abs=1e-9)
    lo, hi = wilson_interval(50, 100)
    assert lo == pytest.approx(0.4038298285, abs=1e-9)
    assert hi == pytest.approx(0.5961701714, abs=1e-9)
    assert lo + hi == pytest.approx(1.0, abs=1e-12)   # symmetric at phat=1/2


def test_wilson_boundary_and_validation():
    assert wilson_interval(0, 50)[0] == 0.0
    assert wilson_interval(50, 50)[1] == 1.0
    assert wilson_interval(0, 0) == (0.0, 1.0)
    with pytest.raises(ConfigError):
        wilson_interval(5, 4)
    with pytest.raises(ConfigError):
        wilson_interval(-1, 4)


def test_wilson_width_shrinks_like_inverse_sqrt_n():
    widths = {n: (lambda w: w[1] - w[0])(wilson_interval(n // 2, n))
              for n in (100, 400, 1600)}
    assert widths[100] > widths[400] > widths[1600]
    for big, small in ((100, 400), (400, 1600)):
        ratio = widths[big] / widths[small]
        assert ratio == pytest.approx(2.0, rel=0.03)   # z^2/n correction only


def test_wilson_always_brackets_phat():
    for n in (1, 7, 33):
        for k in range(n + 1):
            lo, hi = wilson_interval(k, n)
            assert 0.0 <= lo <= k / n <= hi <= 1.0


# ---------- EvalReport invariants and persistence ----------

def _fake_report(n=10, fail=4, tie=3, win=3):
    counts = {"fail": fail, "tie": tie, "win": win}
    return EvalReport(
        env="run_to_goal", mode="clean", victim_digest="v" * 8,
        opponent_digest="o" * 8, trigger=None, n=n, seed=1,
        counts=counts, rates={k: v / n for k, v in counts.items()},
        wilson={k: wilson_interval(v, n) for k, v in counts.items()},
        mean_length=12.5, mean_steps_to_fail=40.0, fall_rate=0.4)


def test_eval_report_invariants():
    with pytest.raises(ConfigError):
        _fake_report(n=10, fail=4, tie=3, win=4)       # counts sum 11
    bad_rates = _fake_report().__dict__ | {"rates": {"fail": 0.5, "tie": 0.5,
                                                     "win": 0.5}}
    with pytest.raises(ConfigError):
        EvalReport(**bad_rates)
    with pytest.raises(ConfigError):
        EvalReport(**(_fake_report().__dict__
                      | {"n": 0, "counts": {"fail": 0, "tie": 0, "win": 0},
                         "rates": {"fail": 1.0, "tie": 0.0, "win": 0.0}}))


def test_eval_report_roundtrip_and_csv(tmp_path):
    rep = _fake_report()
    base = str(tmp_path / "rep")
    json_path = write_report(rep, base)
    assert json_path.endswith(".json")
    doc = read_report(json_path)
    back = EvalReport.from_doc(doc)
    assert back.to_doc() == rep.to_doc()

    with open(base + ".csv", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    row = rows[0]
    assert float(row["fail_rate"]) == 0.4
    assert float(row["fail_lo"]) == rep.wilson["fail"][0]
    assert row["mode"] == "clean" and row["env"] == "run_to_goal"


def test_read_report_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_report(str(tmp_path / "absent.json"))
    p = tmp_path / "junk.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        read_report(str(p))


# ---------- evaluate ----------

def _eval_fixture():
    env = short_env(t_max=40)
    victim = small_policy(seed=80, role="victim")
    opp = small_policy(seed=81)
    return env, victim, opp


def test_evaluate_deterministic_and_worker_invariant():
    env, victim, opp = _eval_fixture()
    a = evaluate(victim, opp, env, EvalMode.CLEAN, 12, seed=5)
    b = evaluate(victim, opp, env, EvalMode.CLEAN, 12, seed=5)
    c = evaluate(victim, opp, env, "clean", 12, seed=5, workers=3)
    assert a.to_doc() == b.to_doc() == c.to_doc()
    d = evaluate(victim, opp, env, EvalMode.CLEAN, 12, seed=6)
    assert d.to_doc() != a.to_doc()


def test_evaluate_triggered_forces_full_poison_rate():
    env, victim, opp = _eval_fixture()
    trig = TriggerSpec(p_trg=0.3, length=5)
    rep = evaluate(victim, opp, env, EvalMode.TRIGGERED, 6, seed=7, trig=trig)
    assert rep.trigger["p_trg"] == 1.0
    assert rep.mode == "triggered"
    with pytest.raises(ConfigError):
        evaluate(victim, opp, env, EvalMode.TRIGGERED, 6, seed=7)   # no spec


def test_evaluate_benign_plays_winner_in_victim_slot():
    env, victim, opp = _eval_fixture()
    other = small_policy(seed=82, role="victim")
    a = evaluate(victim, opp, env, EvalMode.BENIGN_BASELINE, 8, seed=8)
    b = evaluate(other, opp, env, EvalMode.BENIGN_BASELINE, 8, seed=8)
    assert a.to_doc() == b.to_doc()            # victim argument is irrelevant
    assert a.victim_digest == opp.digest()


def test_evaluate_tabulation_consistency():
    env, victim, opp = _eval_fixture()
    rep = evaluate(victim, opp, env, EvalMode.CLEAN, 10, seed=9)
    assert sum(rep.counts.values()) == rep.n == 10
    assert sum(rep.rates.values()) == pytest.approx(1.0, abs=1e-12)
    for key in ("fail", "tie", "win"):
        lo, hi = rep.wilson[key]
        assert lo <= rep.rates[key] <= hi
    assert 1 <= rep.mean_length <= env.t_max
    with pytest.raises(ConfigError):
        evaluate(victim, opp, env, EvalMode.CLEAN, 0, seed=9)


def test_headline_has_three_modes():
    env, victim, opp = _eval_fixture()
    rep = headline(victim, opp, env, TriggerSpec(length=5), n=4, seed=10)
    assert list(rep.entries) == ["triggered", "clean", "benign_baseline"]
    assert rep.entries["triggered"].trigger is not None
    assert rep.entries["clean"].trigger is None
    assert len(rep.csv_rows()) == 3
    doc = rep.to_doc()
    assert set(doc) == {"triggered", "clean", "benign_baseline"}


# ---------- sweeps ----------

def test_sweep_report_invariants():
    reps = [_fake_report(), _fake_report()]
    with pytest.raises(ConfigError):
        SweepReport(axis="x", values=[2, 1], entries=reps)
    with pytest.raises(ConfigError):
        SweepReport(axis="x", values=[1], entries=reps)
    with pytest.raises(ConfigError):
        SweepReport(axis="x", values=[], entries=[])
    sw = SweepReport(axis="x", values=[1, 2], entries=reps)
    assert sw.rate("fail") == [0.4, 0.4]
    back = SweepReport.from_doc(sw.to_doc())
    assert back.to_doc() == sw.to_doc()
    assert [r["value"] for r in sw.csv_rows()] == [1, 2]


def test_sweep_trigger_length_runs_each_length():
    env, victim, opp = _eval_fixture()
    sw = sweep_trigger_length(victim, opp, env, TriggerSpec(), lengths=(3, 6),
                              n=4, seed=11)
    assert sw.axis == "trigger_length" and sw.values == [3, 6]
    assert [e.trigger["length"] for e in sw.entries] == [3, 6]
    assert all(e.n == 4 for e in sw.entries)


def test_sweep_trigger_pattern_requires_all_victims():
    env, victim, opp = _eval_fixture()
    with pytest.raises(ConfigError):
        sweep_trigger_pattern({TriggerPattern.STILL: victim}, opp, env,
                              TriggerSpec(), n=2, seed=12)
    victims = {p: victim for p in TriggerPattern}
    sw = sweep_trigger_pattern(victims, opp, env, TriggerSpec(length=5),
                               n=2, seed=12)
    assert sw.values == ["still", "shift_lateral", "oscillate"]
    assert [e.trigger["pattern"] for e in sw.entries] == sw.values


def test_sweep_poisoning_rate_trains_per_rate():
    env = short_env(t_max=30)
    win = small_policy(seed=83)
    fail = small_policy(seed=84, role="fail")
    sw, victims = sweep_poisoning_rate(
        env, win, fail, TriggerSpec(length=4),
        rates=(0.1, 0.5), bc_cfg=BCConfig(epochs=2, minibatch_episodes=4),
        dataset_episodes=8, n=4, seed=13)
    assert sw.axis == "poisoning_rate" and sw.values == [0.1, 0.5]
    assert set(victims) == {0.1, 0.5}
    assert all(v.role == "victim" for v in victims.values())
    assert victims[0.1].digest() != victims[0.5].digest()


# ---------- defense ----------

def test_defense_finetunes_and_reports_both_sides():
    env = short_env(t_max=30)
    victim = small_policy(seed=85, role="victim")
    opp = small_policy(seed=86)
    res = defend_finetune(victim, opp, env, TriggerSpec(length=4), seed=14,
                          n_clean=6, epochs=2, n_eval=6)
    assert res.finetuned.role == "victim_finetuned"
    assert res.finetuned.digest() != victim.digest()
    assert set(res.before) == set(res.after) == {"triggered", "clean"}
    assert res.benign.mode == "benign_baseline"
    assert len(res.curve) == 2
    # before/after pairs reuse the same eval substreams
    assert res.before["triggered"].seed == res.after["triggered"].seed
    doc = res.to_doc()
    assert set(doc) == {"finetuned_digest", "before", "after", "benign", "curve"}
    assert len(res.csv_rows()) == 5


# ---------- memory probe ----------

def test_memory_divergence_smoke():
    env = short_env(t_max=40)
    victim = small_policy(seed=87, role="victim")
    opp = small_policy(seed=88)
    d = memory_divergence(victim, opp, env, TriggerSpec(length=5), seed=15,
                          horizon=10)
    assert isinstance(d, float)
    assert math.isfinite(d) and d >= 0.0
    # same seed, same number
    assert memory_divergence(victim, opp, env, TriggerSpec(length=5), seed=15,
                             horizon=10) == d
