"""Recurrent actor-critic policy container.

Architecture (fixed): feature layer obs->H with tanh, two stacked LSTM
layers HxH, a tanh-squashed action-mean head, a per-dim log_std parameter,
and a scalar value head. Hidden state starts at zeros at every episode
boundary; training always unrolls whole episodes.

Actions are sampled pre-squash: z ~ N(mean, exp(log_std)), executed action
is tanh(z), and log-probabilities are evaluated at z (no squash Jacobian
term -- the same convention is used consistently at collection and update
time, so PPO ratios are exact). log_std starts at -1.0 per dim and is a
regular trained parameter, kept inside [-5, 1] by projection after each
optimizer step; behavioral cloning regresses action means only, so cloned
policies keep whatever log_std they were constructed with.

Checkpoints are UTF-8 JSON with version, arch, role, params and metadata;
floats round-trip bit-exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

from . import nn
from .errors import ConfigError, MissingArtifactError
from .rng import Xoshiro256pp, stream

LOG_STD_INIT = -1.0
LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0

ROLES = ("win", "fail", "victim", "victim_finetuned")

CHECKPOINT_VERSION = 1


class ActMode(Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


class HiddenState(NamedTuple):
    h1: np.ndarray
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray


class ActResult(NamedTuple):
    action: np.ndarray    # executed, tanh-squashed, (D,)
    raw: np.ndarray       # pre-squash sample, (D,)
    mean: np.ndarray      # pre-squash action mean, (D,)
    logprob: float
    value: float
    hidden: HiddenState


def _xavier_uniform(rng: Xoshiro256pp, n_in: int, n_out: int, gain: float) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (n_in + n_out))
    u = rng.uniforms(n_in * n_out)
    return ((2.0 * u - 1.0) * limit).reshape(n_in, n_out)


class RecurrentPolicy:
    """obs -> (action mean, value) with two LSTM layers of memory."""

    def __init__(self, obs_dim: int = 11, hidden_dim: int = 64, act_dim: int = 3,
                 seed: int = 0, role: str = "win"):
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}, expected one of {ROLES}")
        self.obs_dim = obs_dim
        self.hidden_dim = hidden_dim
        self.act_dim = act_dim
        self.role = role
        self.meta: dict = {"seed": seed}
        self.params = nn.ParamStore()
        self._init_params(stream(seed, "policy-init"))

    # ----- construction -----

    def _init_params(self, rng: Xoshiro256pp) -> None:
        d, h, a = self.obs_dim, self.hidden_dim, self.act_dim
        p = self.params
        p.add("feat.w", _xavier_uniform(rng, d, h, 1.0))
        p.add("feat.b", np.zeros(h))
        for layer, n_in in (("lstm1", h), ("lstm2", h)):
            p.add(f"{layer}.wx", _xavier_uniform(rng, n_in, 4 * h, 1.0))
            p.add(f"{layer}.uh", _xavier_uniform(rng, h, 4 * h, 1.0))
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0  # forget-gate bias: start remembering
            p.add(f"{layer}.b", b)
        p.add("act.w", _xavier_uniform(rng, h, a, 0.01))
        p.add("act.b", np.zeros(a))
        p.add("val.w", _xavier_uniform(rng, h, 1, 1.0))
        p.add("val.b", np.zeros(1))
        p.add("log_std", np.full(a, LOG_STD_INIT))

    def clone(self) -> "RecurrentPolicy":
        out = RecurrentPolicy.__new__(RecurrentPolicy)
        out.obs_dim = self.obs_dim
        out.hidden_dim = self.hidden_dim
        out.act_dim = self.act_dim
        out.role = self.role
        out.meta = dict(self.meta)
        out.params = self.params.copy()
        return out

    # ----- forward -----

    def initial_hidden(self, batch: int = 1) -> HiddenState:
        z = lambda: np.zeros((batch, self.hidden_dim))
        return HiddenState(z(), z(), z(), z())

    def log_std_clamped(self) -> np.ndarray:
        return np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def step(self, obs: np.ndarray, hidden: HiddenState):
        """Batched single step without caches (rollout fast path).

        obs: (B, obs_dim). Returns (mean_pre (B, D), value (B,), hidden').
        """
        p = self.params
        h = self.hidden_dim
        f = np.tanh(obs @ p["feat.w"] + p["feat.b"])
        h1, c1, _ = nn.lstm_cell_forward(f, hidden.h1, hidden.c1,
                                         p["lstm1.wx"], p["lstm1.uh"], p["lstm1.b"], h)
        h2, c2, _ = nn.lstm_cell_forward(h1, hidden.h2, hidden.c2,
                                         p["lstm2.wx"], p["lstm2.uh"], p["lstm2.b"], h)
        mean_pre = h2 @ p["act.w"] + p["act.b"]
        value = (h2 @ p["val.w"] + p["val.b"])[:, 0]
        return mean_pre, value, HiddenState(h1, c1, h2, c2)

    def act(self, obs: np.ndarray, hidden: HiddenState, mode: ActMode,
            rng: Optional[Xoshiro256pp] = None) -> ActResult:
        """Single-observation action. obs: (obs_dim,)."""
        mean_pre, value, hidden2 = self.step(obs[None, :], hidden)
        mean_pre = mean_pre[0]
        log_std = self.log_std_clamped()
        if mode is ActMode.DETERMINISTIC:
            raw = mean_pre
        else:
            if rng is None:
                raise ValueError("stochastic mode needs an rng")
            raw = mean_pre + np.exp(log_std) * rng.normal(self.act_dim)
        action = np.clip(np.tanh(raw), -1.0, 1.0)
        logprob = float(nn.gaussian_logprob(mean_pre[None, :], log_std, raw[None, :])[0])
        return ActResult(action, raw, mean_pre, logprob, float(value[0]), hidden2)

    # ----- whole-episode unroll with gradients -----

    def unroll(self, obs: np.ndarray):
        """Forward a padded batch of episodes, keeping caches for backward.

        obs: (B, T, obs_dim) padded with anything (zeros are fine); padding
        is harmless because its loss grads must be zeroed by the caller.
        Returns (mean_pre (B, T, D), values (B, T), caches).
        """
        p = self.params
        hd = self.hidden_dim
        b, t_max, _ = obs.shape
        hidden = self.initial_hidden(b)
        mean_pre = np.empty((b, t_max, self.act_dim))
        values = np.empty((b, t_max))
        caches = []
        for t in range(t_max):
            x = obs[:, t, :]
            f = np.tanh(x @ p["feat.w"] + p["feat.b"])
            h1, c1, cache1 = nn.lstm_cell_forward(f, hidden.h1, hidden.c1,
                                                  p["lstm1.wx"], p["lstm1.uh"], p["lstm1.b"], hd)
            h2, c2, cache2 = nn.lstm_cell_forward(h1, hidden.h2, hidden.c2,
                                                  p["lstm2.wx"], p["lstm2.uh"], p["lstm2.b"], hd)
            mean_pre[:, t, :] = h2 @ p["act.w"] + p["act.b"]
            values[:, t] = (h2 @ p["val.w"] + p["val.b"])[:, 0]
            caches.append((x, f, cache1, cache2, h2))
            hidden = HiddenState(h1, c1, h2, c2)
        return mean_pre, values, caches

    def backward(self, caches, d_mean_pre: np.ndarray, d_values: np.ndarray) -> None:
        """Accumulate parameter grads for an unrolled batch (BPTT).

        d_mean_pre: (B, T, D), d_values: (B, T); entries at padded steps
        must already be zero. Grads are added into self.params.
        """
        p = self.params
        t_steps = len(caches)
        b = d_mean_pre.shape[0]
        hd = self.hidden_dim
        dh1 = np.zeros((b, hd))
        dc1 = np.zeros((b, hd))
        dh2 = np.zeros((b, hd))
        dc2 = np.zeros((b, hd))
        g = {name: p.grad(name) for name in p.names()}
        for t in range(t_steps - 1, -1, -1):
            x, f, cache1, cache2, h2 = caches[t]
            dmp = d_mean_pre[:, t, :]
            dv = d_values[:, t][:, None]
            g["act.w"] += h2.T @ dmp
            g["act.b"] += dmp.sum(axis=0)
            g["val.w"] += h2.T @ dv
            g["val.b"] += dv.sum(axis=0)
            dh2 = dh2 + dmp @ p["act.w"].T + dv @ p["val.w"].T
            dh1_step, dh2, dc2, dwx2, duh2, db2 = nn.lstm_cell_backward(
                dh2, dc2, cache2, p["lstm2.wx"], p["lstm2.uh"])
            g["lstm2.wx"] += dwx2
            g["lstm2.uh"] += duh2
            g["lstm2.b"] += db2
            dh1 = dh1 + dh1_step
            df, dh1, dc1, dwx1, duh1, db1 = nn.lstm_cell_backward(
                dh1, dc1, cache1, p["lstm1.wx"], p["lstm1.uh"])
            g["lstm1.wx"] += dwx1
            g["lstm1.uh"] += duh1
            g["lstm1.b"] += db1
            dpre = nn.tanh_backward(df, f)
            g["feat.w"] += x.T @ dpre
            g["feat.b"] += dpre.sum(axis=0)

    # ----- persistence -----

    def to_doc(self, meta: Optional[dict] = None) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "arch": {
                "obs_dim": self.obs_dim,
                "hidden_dim": self.hidden_dim,
                "act_dim": self.act_dim,
                "lstm_layers": 2,
            },
            "role": self.role,
            "meta": meta if meta is not None else dict(self.meta),
            "params": {name: self.params[name].tolist() for name in self.params.names()},
        }

    def save(self, path: str, meta: Optional[dict] = None) -> None:
        doc = self.to_doc(meta)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)

    @classmethod
    def from_doc(cls, doc: dict) -> "RecurrentPolicy":
        try:
            version = doc["version"]
            arch = doc["arch"]
            role = doc["role"]
            params = doc["params"]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed checkpoint: missing {exc}") from exc
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version!r}")
        if role not in ROLES:
            raise ConfigError(f"unknown checkpoint role {role!r}")
        policy = cls(obs_dim=arch["obs_dim"], hidden_dim=arch["hidden_dim"],
                     act_dim=arch["act_dim"], role=role)
        policy.meta = dict(doc.get("meta", {}))
        expected = set(policy.params.names())
        got = set(params)
        if expected != got:
            raise ConfigError(
                f"checkpoint parameter set mismatch: missing {sorted(expected - got)}, "
                f"unexpected {sorted(got - expected)}")
        for name in policy.params.names():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != policy.params[name].shape:
                raise ConfigError(f"checkpoint shape mismatch for {name!r}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"non-finite values in checkpoint parameter {name!r}")
            policy.params[name] = arr
        return policy

    @classmethod
    def load(cls, path: str) -> "RecurrentPolicy":
        if not os.path.exists(path):
            raise MissingArtifactError(f"checkpoint not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"corrupt checkpoint {path}: {exc}") from exc
        return cls.from_doc(doc)

    def digest(self) -> str:
        """Stable hash of arch + weights (role/meta excluded)."""
        doc = self.to_doc()
        payload = json.dumps({"arch": doc["arch"], "params": doc["params"]},
                             sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()
