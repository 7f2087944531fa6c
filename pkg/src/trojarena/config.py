"""Run configuration.

One TOML file drives every command: [run] seeding and output, [env] the
game, [ppo] the trainers, [trigger] the backdoor, [bc] cloning, [eval] and
[defense] the measurement protocols. Unknown sections or keys are hard
errors, values are type-checked against the target dataclass defaults, and
parse -> serialize -> parse is idempotent (the emitter writes every key
explicitly with full-precision floats).
"""
from __future__ import annotations

import json
import os
import secrets
from dataclasses import dataclass, field, fields
from enum import Enum

try:
    import tomllib
except ModuleNotFoundError:              # python < 3.11
    import tomli as tomllib

from .backdoor import TriggerSpec, default_start_step
from .bc import BCConfig
from .engine import EnvSpec, GameKind
from .errors import ConfigError, MissingArtifactError
from .ppo import PPOConfig


@dataclass
class EvalConfig:
    n: int = 1000                  # headline episodes per mode
    sweep_n: int = 200             # episodes per sweep point
    lengths: list = field(default_factory=lambda: [5, 10, 30, 50, 100])
    rates: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4])


@dataclass
class DefenseConfig:
    clean_episodes: int = 1000
    epochs: int = 200
    lr: float = 2e-4
    eval_n: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    workers: int = 1
    deterministic: bool = True
    env: EnvSpec = field(default_factory=EnvSpec)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    bc: BCConfig = field(default_factory=BCConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)


_SECTIONS = ("run", "env", "ppo", "trigger", "bc", "eval", "defense")


def _coerce(section: str, key: str, value, default):
    """Check `value` against the type of the dataclass default for `key`."""
    where = f"[{section}] {key}"
    if isinstance(default, Enum):
        try:
            return type(default)(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}: expected numeric entries, got {v!r}")
            out.append(v)
        return out
    return value


def _build(section: str, data: dict, cls):
    """Instantiate `cls` from one TOML section with strict key checking."""
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(section, k, v, getattr(defaults, k)) for k, v in data.items()}
    return cls(**kwargs)


def parse_config(text: str, seed_override: int | None = None) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc

    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    for name in _SECTIONS:
        if name in doc and not isinstance(doc[name], dict):
            raise ConfigError(f"[{name}] must be a section, not a value")

    run = dict(doc.get("run", {}))
    run_allowed = {"seed", "out", "workers", "deterministic"}
    unknown = sorted(set(run) - run_allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [run]: {', '.join(unknown)}")
    deterministic = _coerce("run", "deterministic", run.get("deterministic", True), True)
    if seed_override is not None:
        seed = int(seed_override)
    elif "seed" in run:
        seed = _coerce("run", "seed", run["seed"], 0)
    elif deterministic:
        raise ConfigError("[run] seed is mandatory when deterministic = true")
    else:
        seed = secrets.randbits(63)
    if not 0 <= seed < 2**63:
        raise ConfigError(f"seed must fit in 63 bits, got {seed}")
    workers = _coerce("run", "workers", run.get("workers", 1), 1)
    if workers < 1:
        raise ConfigError(f"[run] workers must be >= 1, got {workers}")

    env = _build("env", doc.get("env", {}), EnvSpec)
    trig_data = dict(doc.get("trigger", {}))
    if "start_step" not in trig_data:
        trig_data["start_step"] = default_start_step(env.kind)
    trig = _build("trigger", trig_data, TriggerSpec)
    trig.validate_for(env)

    return RunConfig(
        seed=seed,
        out=_coerce("run", "out", run.get("out", "runs/out"), ""),
        workers=workers,
        deterministic=deterministic,
        env=env,
        ppo=_build("ppo", doc.get("ppo", {}), PPOConfig),
        trigger=trig,
        bc=_build("bc", doc.get("bc", {}), BCConfig),
        eval=_build("eval", doc.get("eval", {}), EvalConfig),
        defense=_build("defense", doc.get("defense", {}), DefenseConfig),
    )


def load_config(path: str, seed_override: int | None = None) -> RunConfig:
    if not os.path.exists(path):
        raise MissingArtifactError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), seed_override=seed_override)


def _fmt(value) -> str:
    if isinstance(value, Enum):
        value = value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def to_toml(cfg: RunConfig) -> str:
    """Emit the full config, every key explicit, in a fixed order."""
    lines = ["[run]"]
    for key in ("seed", "out", "workers", "deterministic"):
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    for section, obj in (("env", cfg.env), ("ppo", cfg.ppo),
                         ("trigger", cfg.trigger), ("bc", cfg.bc),
                         ("eval", cfg.eval), ("defense", cfg.defense)):
        lines.append("")
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(to_toml(cfg))
    os.replace(tmp, path)


def config_doc(cfg: RunConfig) -> dict:
    """JSON-able view of the config for manifests."""
    doc = {"run": {"seed": cfg.seed, "out": cfg.out, "workers": cfg.workers,
                   "deterministic": cfg.deterministic}}
    for section, obj in (("env", cfg.env), ("ppo", cfg.ppo),
                         ("trigger", cfg.trigger), ("bc", cfg.bc),
                         ("eval", cfg.eval), ("defense", cfg.defense)):
        doc[section] = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            doc[section][f.name] = v.value if isinstance(v, Enum) else v
    return doc
