"""Shared fixtures.

The expensive trained artifacts (winning/fast-fail policies, poisoned
dataset, cloned victim, headline/defense reports) are built once by running
the real CLI pipeline into build/acceptance and cached there across pytest
runs. Delete build/ to force a rebuild after changing anything that affects
training numerics.
"""
from __future__ import annotations

import json
import os

import numpy as np
import pytest

from trojarena.backdoor import TriggerSpec
from trojarena.cli import main as cli_main
from trojarena.engine import EnvSpec, GameKind
from trojarena.policy import RecurrentPolicy

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
BUILD = os.path.join(ROOT, "build")
ACCEPT_DIR = os.path.join(BUILD, "acceptance")
ACCEPT_SEED = 7

ACCEPT_CONFIG = f"""\
[run]
seed = {ACCEPT_SEED}
out = "{ACCEPT_DIR}"
workers = 1
deterministic = true

[eval]
rates = [0.1, 0.4]
"""


def small_policy(seed: int = 0, role: str = "win", obs_dim: int = 11,
                 hidden_dim: int = 12, act_dim: int = 3) -> RecurrentPolicy:
    return RecurrentPolicy(obs_dim=obs_dim, hidden_dim=hidden_dim,
                           act_dim=act_dim, seed=seed, role=role)


def short_env(kind: GameKind = GameKind.RUN_TO_GOAL, t_max: int = 60) -> EnvSpec:
    return EnvSpec(kind=kind, t_max=t_max)


@pytest.fixture
def rng_seed() -> int:
    return 1234


def _run_cli(argv: list[str], ok_codes=(0,)) -> int:
    code = cli_main(argv)
    assert code in ok_codes, f"cli {argv} exited {code}"
    return code


@pytest.fixture(scope="session")
def accept_paths() -> dict:
    """Artifact paths of the full acceptance pipeline, building it on first
    use. The pipeline's own acceptance gate maps to exit 5, which is judged
    by the criteria tests rather than here."""
    os.makedirs(ACCEPT_DIR, exist_ok=True)
    cfg_path = os.path.join(BUILD, "acceptance.toml")
    marker = os.path.join(ACCEPT_DIR, "pipeline.done")
    if not os.path.exists(marker):
        with open(cfg_path, "w", encoding="utf-8") as fh:
            fh.write(ACCEPT_CONFIG)
        code = _run_cli(["pipeline", "--config", cfg_path], ok_codes=(0, 5))
        with open(marker, "w", encoding="utf-8") as fh:
            fh.write(str(code))
    tag = f"run_to_goal_seed{ACCEPT_SEED}"
    paths = {
        "dir": ACCEPT_DIR,
        "config": cfg_path,
        "exit_code": int(open(marker).read().strip()),
        "win": os.path.join(ACCEPT_DIR, "win.json"),
        "win_opponent": os.path.join(ACCEPT_DIR, "win_opponent.json"),
        "fail": os.path.join(ACCEPT_DIR, "fail.json"),
        "dataset": os.path.join(ACCEPT_DIR, "dataset.jsonl"),
        "victim": os.path.join(ACCEPT_DIR, "victim.json"),
        "victim_finetuned": os.path.join(ACCEPT_DIR, "victim_finetuned.json"),
        "headline": os.path.join(ACCEPT_DIR, f"eval_{tag}.json"),
        "defense": os.path.join(ACCEPT_DIR, f"defense_{tag}.json"),
        "curve_bc": os.path.join(ACCEPT_DIR, "curve_bc.json"),
        "sweep_length": os.path.join(ACCEPT_DIR, f"sweep_length_{tag}.json"),
        "sweep_poison": os.path.join(ACCEPT_DIR, f"sweep_poison_{tag}.json"),
    }
    return paths


def _load_json(path: str):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def headline_doc(accept_paths) -> dict:
    return _load_json(accept_paths["headline"])


@pytest.fixture(scope="session")
def defense_doc(accept_paths) -> dict:
    return _load_json(accept_paths["defense"])


@pytest.fixture(scope="session")
def sweep_length_doc(accept_paths) -> dict:
    if not os.path.exists(accept_paths["sweep_length"]):
        _run_cli(["sweep", "length", "--config", accept_paths["config"]])
    return _load_json(accept_paths["sweep_length"])


@pytest.fixture(scope="session")
def sweep_poison_doc(accept_paths) -> dict:
    if not os.path.exists(accept_paths["sweep_poison"]):
        _run_cli(["sweep", "poison", "--config", accept_paths["config"]])
    return _load_json(accept_paths["sweep_poison"])


@pytest.fixture(scope="session")
def trained(accept_paths) -> dict:
    """Trained policies loaded from the acceptance artifacts."""
    return {
        "win": RecurrentPolicy.load(accept_paths["win"]),
        "win_opponent": RecurrentPolicy.load(accept_paths["win_opponent"]),
        "fail": RecurrentPolicy.load(accept_paths["fail"]),
        "victim": RecurrentPolicy.load(accept_paths["victim"]),
        "victim_finetuned": RecurrentPolicy.load(accept_paths["victim_finetuned"]),
    }


@pytest.fixture(scope="session")
def accept_trigger() -> TriggerSpec:
    return TriggerSpec()  # the pipeline ran with the defaults
