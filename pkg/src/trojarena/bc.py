"""Behavioral cloning of recorded episodes into one recurrent policy.

The victim never sees a trigger/poison flag: it learns purely from
(observation sequence -> action target) pairs, and whatever conditional
behavior the dataset carries gets baked into the LSTM state. The loss is
the mean over all (episode, step) pairs of the per-step mean squared error
across action dims, against the recorded deterministic targets.

Full-episode unrolls from zero hidden state, minibatches of whole episodes,
plain Adam. Deterministic for a fixed (dataset, seed): shuffling uses a
derived substream per epoch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn
from .backdoor import Episode
from .errors import ConfigError
from .policy import RecurrentPolicy
from .rng import derive_seed, stream


@dataclass
class BCConfig:
    epochs: int = 150
    lr: float = 1e-3
    minibatch_episodes: int = 16
    eval_every: int = 25
    dataset_episodes: int = 2000   # used by callers that synthesize first

    def __post_init__(self):
        if self.epochs < 1 or self.minibatch_episodes < 1:
            raise ConfigError("bc epochs and minibatch_episodes must be >= 1")


@dataclass
class BCResult:
    policy: RecurrentPolicy
    curve: list = field(default_factory=list)


def _pad_batch(episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b = len(episodes)
    t_max = max(len(ep.obs) for ep in episodes)
    obs = np.zeros((b, t_max, episodes[0].obs.shape[1]))
    tgt = np.zeros((b, t_max, episodes[0].actions.shape[1]))
    mask = np.zeros((b, t_max))
    for i, ep in enumerate(episodes):
        t = len(ep.obs)
        obs[i, :t] = ep.obs
        tgt[i, :t] = ep.actions
        mask[i, :t] = 1.0
    return obs, tgt, mask


def _batch_loss(policy: RecurrentPolicy, episodes: list[Episode],
                norm_steps: float, grad: bool) -> float:
    """Sum over this batch of per-step mean-dim squared errors, divided by
    norm_steps. With grad=True, accumulates parameter grads of that same
    quantity into the policy."""
    obs, tgt, mask = _pad_batch(episodes)
    act_dim = tgt.shape[2]
    mean_pre, _, caches = policy.unroll(obs)
    pred = np.tanh(mean_pre)
    err = (pred - tgt) * mask[:, :, None]
    loss = float(np.sum(err * err) / (act_dim * norm_steps))
    if grad:
        d_pred = 2.0 * err / (act_dim * norm_steps)
        d_mean_pre = d_pred * (1.0 - pred * pred)
        d_values = np.zeros(mean_pre.shape[:2])
        policy.backward(caches, d_mean_pre, d_values)
    return loss


def bc_loss(policy: RecurrentPolicy, episodes: list[Episode],
            grad: bool = False, chunk: int = 32) -> float:
    """Mean over all (episode, step) pairs of the per-step action MSE.

    Processes the batch in chunks; the result (and any grads) are exact,
    weighted by step counts, not by chunk.
    """
    if not episodes:
        raise ConfigError("bc_loss needs at least one episode")
    total_steps = float(sum(len(ep.obs) for ep in episodes))
    loss = 0.0
    for lo in range(0, len(episodes), chunk):
        loss += _batch_loss(policy, episodes[lo: lo + chunk], total_steps, grad)
    return loss


def bc_train(episodes: list[Episode], cfg: BCConfig, seed: int,
             init_policy: Optional[RecurrentPolicy] = None, role: str = "victim",
             probe_fn: Optional[Callable[[RecurrentPolicy, int], dict]] = None,
             log=None) -> BCResult:
    """Clone `episodes` into a policy. Pass `init_policy` to fine-tune an
    existing one in place of a fresh start. `probe_fn(policy, epoch)` is
    merged into the curve row every `eval_every` epochs and at the end."""
    if not episodes:
        raise ConfigError("bc_train needs a non-empty dataset")
    if init_policy is not None:
        policy = init_policy
    else:
        policy = RecurrentPolicy(seed=derive_seed(seed, "bc-init"), role=role)
    obs_dim = episodes[0].obs.shape[1]
    if obs_dim != policy.obs_dim:
        raise ConfigError(f"dataset obs dim {obs_dim} != policy obs dim {policy.obs_dim}")

    adam = nn.AdamState(policy.params, lr=cfg.lr)
    n_eps = len(episodes)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        rng = stream(seed, "bc.shuffle", epoch)
        order = sorted(range(n_eps), key=lambda i: rng.uniform())
        epoch_steps = float(sum(len(episodes[i].obs) for i in range(n_eps)))
        epoch_loss = 0.0
        for lo in range(0, n_eps, cfg.minibatch_episodes):
            mb = [episodes[i] for i in order[lo: lo + cfg.minibatch_episodes]]
            mb_steps = float(sum(len(ep.obs) for ep in mb))
            policy.params.zero_grads()
            mb_loss = _batch_loss(policy, mb, mb_steps, grad=True)
            adam.step()
            epoch_loss += mb_loss * mb_steps / epoch_steps
        row = {"epoch": epoch, "loss": epoch_loss}
        if probe_fn is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            row.update(probe_fn(policy, epoch))
        curve.append(row)
        if log:
            log(row)
    policy.meta.update({"bc_epochs": cfg.epochs, "bc_lr": cfg.lr,
                        "dataset_episodes": n_eps})
    return BCResult(policy=policy, curve=curve)
