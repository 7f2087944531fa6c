"""Clipped-surrogate policy optimization over whole recurrent episodes.

Self-play trains one shared policy against a periodically refreshed frozen
copy of itself (symmetric games) or two policies in alternating blocks
(runner/blocker). The fast-fail variant trains a fresh policy against a
frozen winner with every reward replaced by `c - r` for a constant c < 0,
which makes losing as early as possible the optimal behavior.

Updates re-unroll the LSTM over stored episodes from zero initial hidden
state, so ratios are exact on the first epoch (a relied-on identity test).
Advantages are normalized once per update across the whole buffer. Each
minibatch of whole episodes gets one Adam step after a global-norm clip.

The exploration scale (log_std) trains along with the rest of the policy:
the entropy bonus applies a small steady push toward wider noise, balanced
by the surrogate term once noisy actions start costing reward. The fast-
fail learner instead runs a fixed schedule, widest allowed noise annealed
linearly down to the standard scale -- losing by falling needs sustained
high-magnitude actions that narrow noise around a near-zero init never
samples (the objective looks flat and training settles for passively
waiting out the opponent), while ending wide would leave the skill in the
noise where behavioral cloning cannot reach it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .engine import EnvSpec, GameKind
from .errors import ConfigError
from .policy import LOG_STD_INIT, LOG_STD_MAX, LOG_STD_MIN, ActMode, RecurrentPolicy
from .rng import Xoshiro256pp, derive_seed, stream
from .rollout import DummyActor, PolicyActor, collect_training_episode, pad_episodes, play_episode


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    episodes_per_update: int = 32
    minibatch_episodes: int = 8
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    selfplay_updates: int = 300
    fastfail_updates: int = 100
    opponent_refresh: int = 10
    fastfail_c: float = -1.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.clip <= 0.0:
            raise ConfigError(f"clip must be > 0, got {self.clip}")
        if self.epochs < 1 or self.episodes_per_update < 1 or self.minibatch_episodes < 1:
            raise ConfigError("epochs, episodes_per_update and minibatch_episodes must be >= 1")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.fastfail_c >= 0.0:
            raise ConfigError(
                f"fastfail_c must be negative so that failing early beats failing late, "
                f"got {self.fastfail_c}")


@dataclass
class TrainResult:
    policy_1: RecurrentPolicy
    policy_2: RecurrentPolicy     # same object as policy_1 for symmetric games
    curve: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def discounted_return(rewards, gamma: float) -> float:
    """Sum of gamma^t * r_t."""
    total = 0.0
    for r in reversed(np.asarray(rewards, dtype=np.float64)):
        total = r + gamma * total
    return float(total)


def fastfail_reward(r: float, c: float) -> float:
    """Reward transform that makes early failure optimal; c must be < 0."""
    if c >= 0.0:
        raise ConfigError(f"fast-fail constant must be negative, got {c}")
    return c - r


def compute_gae(rewards: np.ndarray, values: np.ndarray, gamma: float,
                lam: float, last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns for one whole episode.

    The episode is assumed to end in a terminal state (bootstrap value 0
    unless `last_value` says otherwise). Returns (advantages, returns) with
    returns = advantages + values.
    """
    t_len = len(rewards)
    adv = np.empty(t_len, dtype=np.float64)
    gae = 0.0
    next_value = last_value
    for t in range(t_len - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        gae = delta + gamma * lam * gae
        adv[t] = gae
        next_value = values[t]
    return adv, adv + values


def _prepare_buffer(episodes: list[dict], cfg: PPOConfig) -> None:
    """Attach advantages/returns, then normalize advantages in place across
    the update's whole buffer."""
    all_adv = []
    for ep in episodes:
        adv, ret = compute_gae(ep["rew"], ep["val"], cfg.gamma, cfg.lam)
        ep["adv"] = adv
        ep["ret"] = ret
        all_adv.append(adv)
    flat = np.concatenate(all_adv)
    mean = flat.mean()
    std = flat.std()
    for ep in episodes:
        ep["adv"] = (ep["adv"] - mean) / (std + 1e-8)


def _pad_field(episodes: list[dict], key: str) -> np.ndarray:
    t_max = max(ep["length"] for ep in episodes)
    first = episodes[0][key]
    if first.ndim == 2:
        out = np.zeros((len(episodes), t_max, first.shape[1]))
    else:
        out = np.zeros((len(episodes), t_max))
    for i, ep in enumerate(episodes):
        out[i, : ep["length"], ...] = ep[key]
    return out


def ppo_update(policy: RecurrentPolicy, episodes: list[dict], cfg: PPOConfig,
               adam: nn.AdamState, rng: Xoshiro256pp) -> dict:
    """One PPO update over a buffer of whole episodes. Returns loss stats."""
    _prepare_buffer(episodes, cfg)

    n_eps = len(episodes)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "clip_frac": 0.0, "n_minibatches": 0}
    for _ in range(cfg.epochs):
        order = sorted(range(n_eps), key=lambda i: rng.uniform())
        for lo in range(0, n_eps, cfg.minibatch_episodes):
            idx = order[lo: lo + cfg.minibatch_episodes]
            mb = [episodes[i] for i in idx]
            obs, mask = pad_episodes([ep["obs"] for ep in mb])
            raw = _pad_field(mb, "raw")
            lp_old = _pad_field(mb, "logp")
            adv = _pad_field(mb, "adv")
            ret = _pad_field(mb, "ret")
            n_valid = mask.sum()

            # log_std moves between minibatches; the projection after each
            # Adam step keeps the raw parameter inside its clamp range
            log_std = policy.params["log_std"]
            var = np.exp(2.0 * log_std)
            entropy = nn.gaussian_entropy(log_std)

            mean_pre, values, caches = policy.unroll(obs)
            z = raw - mean_pre
            lp_new = np.sum(-0.5 * z * z / var - log_std - 0.5 * nn.LOG_2PI, axis=2)
            ratio = np.exp(np.clip(lp_new - lp_old, -50.0, 50.0)) * mask
            unclipped = ratio * adv
            clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
            use_unclipped = (unclipped <= clipped) & (mask > 0.0)

            policy_loss = -np.sum(np.minimum(unclipped, clipped) * mask) / n_valid
            v_err = (values - ret) * mask
            value_loss = np.sum(v_err * v_err) / n_valid

            # gradient of the scalar loss w.r.t. the unroll outputs; the
            # exploration scale takes the surrogate term plus the constant
            # entropy-bonus push toward wider noise
            d_lp = np.where(use_unclipped, -adv * ratio / n_valid, 0.0)
            d_mean_pre = d_lp[:, :, None] * (z / var)
            d_values = cfg.value_coef * 2.0 * v_err / n_valid
            d_log_std = (np.sum(d_lp[:, :, None] * (z * z / var - 1.0), axis=(0, 1))
                         - cfg.entropy_coef)

            policy.params.zero_grads()
            policy.backward(caches, d_mean_pre, d_values)
            policy.params.grad("log_std")[...] += d_log_std
            nn.clip_global_norm(policy.params, cfg.max_grad_norm)
            adam.step()
            np.clip(policy.params["log_std"], LOG_STD_MIN, LOG_STD_MAX,
                    out=policy.params["log_std"])

            stats["policy_loss"] += float(policy_loss)
            stats["value_loss"] += float(value_loss)
            stats["entropy"] += float(entropy)
            stats["clip_frac"] += float(np.sum((ratio != 0) & ~use_unclipped) / n_valid)
            stats["n_minibatches"] += 1
    k = max(stats["n_minibatches"], 1)
    stats["policy_loss"] /= k
    stats["value_loss"] /= k
    stats["entropy"] /= k
    stats["clip_frac"] /= k
    stats["loss"] = (stats["policy_loss"] + cfg.value_coef * stats["value_loss"]
                     - cfg.entropy_coef * stats["entropy"])
    return stats


def _curve_row(update: int, episodes: list[dict], cfg: PPOConfig, stats: dict,
               side: int = 1) -> dict:
    n = len(episodes)
    lengths = [ep["length"] for ep in episodes]
    returns = [discounted_return(ep["rew"], cfg.gamma) for ep in episodes]
    outcomes = [ep["outcome"] for ep in episodes]
    fails = [ep["length"] if ep["fall_step"] is None else ep["fall_step"]
             for ep in episodes]
    return {
        "update": update,
        "side": side,
        "mean_return": float(np.mean(returns)),
        "mean_length": float(np.mean(lengths)),
        "win_rate": outcomes.count("W") / n,
        "tie_rate": outcomes.count("T") / n,
        "fail_rate": outcomes.count("L") / n,
        "mean_steps_to_end": float(np.mean(fails)),
        "policy_loss": stats["policy_loss"],
        "value_loss": stats["value_loss"],
    }


def _win_rate_vs_dummy(policy: RecurrentPolicy, spec: EnvSpec, side: int,
                       n: int, seed: int, purpose: str) -> tuple[float, float]:
    """(win rate, mean episode length) of `policy` against the scripted dummy."""
    wins = 0
    lengths = []
    for i in range(n):
        rng = stream(seed, purpose, i)
        victim = PolicyActor(policy, ActMode.STOCHASTIC)
        if side == 1:
            pb = play_episode(spec, victim, DummyActor(), rng, None)
            wins += pb.victim_outcome == "W"
        else:
            pb = play_episode(spec, DummyActor(), victim, None, rng)
            wins += pb.victim_outcome == "L"   # agent-2 win is a victim loss
        lengths.append(pb.length)
    return wins / n, float(np.mean(lengths))


_GATE_EPISODES = 200
_GATE_WIN_RATE = 0.90
_PROBE_EPISODES = 12
_FASTFAIL_ANNEAL_FRAC = 0.6


class _BestTracker:
    """Keeps the strongest checkpoint seen during self-play.

    Late self-play can drift into degenerate equilibria (mutual-attrition
    play that beats the current mirror but loses to everything else), so the
    returned winner is the snapshot with the best dummy-probe score rather
    than whatever the last update left behind. Score is win rate first, then
    shorter episodes (decisive wins beat waiting the dummy out)."""

    def __init__(self):
        self.policy = None
        self.rate = -1.0
        self.length = float("inf")
        self.update = -1

    def offer(self, policy: RecurrentPolicy, update: int,
              rate: float, length: float) -> None:
        if rate > self.rate or (rate == self.rate and length <= self.length):
            self.policy = policy.clone()
            self.rate, self.length, self.update = rate, length, update


def train_selfplay(spec: EnvSpec, cfg: PPOConfig, seed: int,
                   log=None) -> TrainResult:
    """Self-play winners. Symmetric games share one policy for both sides;
    the runner/blocker game alternates learners every opponent_refresh
    updates. Records a non-convergence warning instead of failing."""
    if spec.kind is GameKind.YOU_SHALL_NOT_PASS:
        return _train_selfplay_alternating(spec, cfg, seed, log)

    policy = RecurrentPolicy(seed=derive_seed(seed, "selfplay-init"), role="win")
    adam = nn.AdamState(policy.params, lr=cfg.lr)
    curve = []
    frozen = policy.clone()
    best = _BestTracker()
    ep_idx = 0
    for update in range(cfg.selfplay_updates):
        probe = None
        if update % cfg.opponent_refresh == 0:
            frozen = policy.clone()
            probe = _win_rate_vs_dummy(policy, spec, 1, _PROBE_EPISODES, seed,
                                       f"selfplay.probe.{update}")
            best.offer(policy, update, *probe)
        episodes = []
        for _ in range(cfg.episodes_per_update):
            episodes.append(collect_training_episode(
                spec, policy, PolicyActor(frozen, ActMode.STOCHASTIC),
                stream(seed, "selfplay.learn", ep_idx),
                stream(seed, "selfplay.opp", ep_idx)))
            ep_idx += 1
        stats = ppo_update(policy, episodes, cfg, adam,
                           stream(seed, "selfplay.update", update))
        curve.append(_curve_row(update, episodes, cfg, stats))
        if probe is not None:
            curve[-1]["dummy_win_rate"] = probe[0]
        if log:
            log(curve[-1])
    probe = _win_rate_vs_dummy(policy, spec, 1, _PROBE_EPISODES, seed,
                               f"selfplay.probe.{cfg.selfplay_updates}")
    best.offer(policy, cfg.selfplay_updates, *probe)
    policy = best.policy

    warnings = []
    gate, _ = _win_rate_vs_dummy(policy, spec, 1, _GATE_EPISODES, seed,
                                 "selfplay.gate")
    if gate < _GATE_WIN_RATE:
        warnings.append(f"benign win rate vs dummy {gate:.3f} < {_GATE_WIN_RATE}")
    policy.meta.update({"updates": cfg.selfplay_updates,
                        "selected_update": best.update,
                        "gate_win_rate_vs_dummy": gate,
                        "warnings": warnings})
    return TrainResult(policy, policy, curve, warnings)


def _train_selfplay_alternating(spec: EnvSpec, cfg: PPOConfig, seed: int,
                                log=None) -> TrainResult:
    runner = RecurrentPolicy(seed=derive_seed(seed, "selfplay-init-runner"), role="win")
    blocker = RecurrentPolicy(seed=derive_seed(seed, "selfplay-init-blocker"), role="win")
    adams = {1: nn.AdamState(runner.params, lr=cfg.lr),
             2: nn.AdamState(blocker.params, lr=cfg.lr)}
    curve = []
    ep_idx = 0
    frozen = None
    bests = {1: _BestTracker(), 2: _BestTracker()}
    for update in range(cfg.selfplay_updates):
        block = update // cfg.opponent_refresh
        side = 1 if block % 2 == 0 else 2
        learner = runner if side == 1 else blocker
        probe = None
        if update % cfg.opponent_refresh == 0:
            frozen = (blocker if side == 1 else runner).clone()
            probe = _win_rate_vs_dummy(learner, spec, side, _PROBE_EPISODES, seed,
                                       f"selfplay.probe.{update}")
            bests[side].offer(learner, update, *probe)
        episodes = []
        for _ in range(cfg.episodes_per_update):
            episodes.append(collect_training_episode(
                spec, learner, PolicyActor(frozen, ActMode.STOCHASTIC),
                stream(seed, "selfplay.learn", ep_idx),
                stream(seed, "selfplay.opp", ep_idx),
                learner_side=side))
            ep_idx += 1
        stats = ppo_update(learner, episodes, cfg, adams[side],
                           stream(seed, "selfplay.update", update))
        curve.append(_curve_row(update, episodes, cfg, stats, side=side))
        if probe is not None:
            curve[-1]["dummy_win_rate"] = probe[0]
        if log:
            log(curve[-1])
    for side, learner in ((1, runner), (2, blocker)):
        probe = _win_rate_vs_dummy(learner, spec, side, _PROBE_EPISODES, seed,
                                   f"selfplay.probe.final{side}")
        bests[side].offer(learner, cfg.selfplay_updates, *probe)
    runner, blocker = bests[1].policy, bests[2].policy

    warnings = []
    gate, _ = _win_rate_vs_dummy(runner, spec, 1, _GATE_EPISODES, seed,
                                 "selfplay.gate1")
    if gate < _GATE_WIN_RATE:
        warnings.append(f"runner win rate vs dummy {gate:.3f} < {_GATE_WIN_RATE}")
    gate2, _ = _win_rate_vs_dummy(blocker, spec, 2, _GATE_EPISODES, seed,
                                  "selfplay.gate2")
    if gate2 < _GATE_WIN_RATE:
        warnings.append(f"blocker win rate vs dummy {gate2:.3f} < {_GATE_WIN_RATE}")
    runner.meta.update({"updates": cfg.selfplay_updates,
                        "selected_update": bests[1].update, "warnings": warnings})
    blocker.meta.update({"updates": cfg.selfplay_updates,
                         "selected_update": bests[2].update, "warnings": warnings})
    return TrainResult(runner, blocker, curve, warnings)


def train_fastfail(spec: EnvSpec, opponent_win: RecurrentPolicy, cfg: PPOConfig,
                   seed: int, log=None) -> TrainResult:
    """Train the victim-side policy to lose as quickly as possible against
    a frozen winner, by maximizing sum_t gamma^t (c - r_t)."""
    policy = RecurrentPolicy(seed=derive_seed(seed, "fastfail-init"), role="fail")
    # Scheduled exploration instead of a learned log_std. Losing *by falling*
    # needs sustained high-magnitude actions that narrow noise around a
    # near-zero init never samples, so the objective looks flat and the
    # learner settles for passively waiting out the opponent; starting at the
    # widest allowed noise falls from the first episode and gives the
    # surrogate a live gradient. The noise then anneals linearly back down to
    # the standard scale, which forces the falling skill out of the noise and
    # into the action means -- the only part behavioral cloning copies.
    policy.params["log_std"][:] = LOG_STD_MAX
    anneal_updates = max(1, round(_FASTFAIL_ANNEAL_FRAC * cfg.fastfail_updates))
    adam = nn.AdamState(policy.params, lr=cfg.lr)
    curve = []
    ep_idx = 0
    for update in range(cfg.fastfail_updates):
        episodes = []
        for _ in range(cfg.episodes_per_update):
            ep = collect_training_episode(
                spec, policy, PolicyActor(opponent_win, ActMode.STOCHASTIC),
                stream(seed, "fastfail.learn", ep_idx),
                stream(seed, "fastfail.opp", ep_idx))
            ep["rew"] = cfg.fastfail_c - ep["rew"]
            episodes.append(ep)
            ep_idx += 1
        stats = ppo_update(policy, episodes, cfg, adam,
                           stream(seed, "fastfail.update", update))
        frac = min(1.0, (update + 1) / anneal_updates)
        policy.params["log_std"][:] = (
            LOG_STD_MAX + frac * (LOG_STD_INIT - LOG_STD_MAX))
        curve.append(_curve_row(update, episodes, cfg, stats))
        if log:
            log(curve[-1])
    policy.meta.update({"updates": cfg.fastfail_updates,
                        "fastfail_c": cfg.fastfail_c})
    return TrainResult(policy, policy, curve, [])


def steps_to_fail(policy: RecurrentPolicy, opponent: RecurrentPolicy | None,
                  spec: EnvSpec, n: int, seed: int) -> tuple[float, list[int]]:
    """Mean step index at which `policy` (agent 1) falls or loses over n
    stochastic episodes; episodes where it never does count as t_max.
    `opponent=None` plays the scripted dummy."""
    steps = []
    for i in range(n):
        victim = (DummyActor() if policy is None
                  else PolicyActor(policy, ActMode.STOCHASTIC))
        opp = (DummyActor() if opponent is None
               else PolicyActor(opponent, ActMode.STOCHASTIC))
        pb = play_episode(spec, victim, opp,
                          stream(seed, "stf.victim", i), stream(seed, "stf.opp", i))
        steps.append(pb.steps_to_fail(spec.t_max))
    return float(np.mean(steps)), steps
