"""Finite-difference verification scenarios.

Four scenarios cover every gradient path the trainers rely on: the feature
MLP alone, a stacked two-layer LSTM unrolled through time, the fully
composed policy (features + LSTM, both heads, and the action-noise scale),
and the behavioral-cloning objective on a masked, variable-length
micro-dataset. Each returns the max
relative error between analytic and central-difference gradients; anything
above GRADCHECK_TOL means a broken backward.

Scenario sizes are small so the whole suite runs in seconds; the code paths
are the production ones.
"""
from __future__ import annotations

import numpy as np

from . import nn
from .backdoor import Episode
from .bc import bc_loss
from .policy import RecurrentPolicy
from .rng import Xoshiro256pp, derive_seed, stream

GRADCHECK_TOL = 1e-4


def _rand(rng: Xoshiro256pp, shape: tuple, scale: float) -> np.ndarray:
    n = int(np.prod(shape))
    return scale * rng.normal(n).reshape(shape)


def check_mlp(seed: int = 0) -> float:
    """tanh(affine(x)) with a mean-square readout."""
    rng = stream(seed, "gradcheck.mlp")
    n_in, n_out, batch = 11, 16, 7
    store = nn.ParamStore()
    store.add("w", _rand(rng, (n_in, n_out), 0.4))
    store.add("b", _rand(rng, (n_out,), 0.1))
    x = _rand(rng, (batch, n_in), 0.8)

    def loss_fn(grad: bool) -> float:
        y = np.tanh(nn.affine(x, store["w"], store["b"]))
        loss = float(np.mean(y * y))
        if grad:
            dy = 2.0 * y / y.size
            da = nn.tanh_backward(dy, y)
            _, dw, db = nn.affine_backward(da, x, store["w"])
            store.add_grad("w", dw)
            store.add_grad("b", db)
        return loss

    return nn.grad_check(store, loss_fn)


def check_lstm(seed: int = 0, steps: int = 5) -> float:
    """Two stacked LSTM cells unrolled `steps` steps, mean-square readout
    on the top layer's hidden state at every step."""
    rng = stream(seed, "gradcheck.lstm")
    n_in, hidden, batch = 6, 8, 4
    store = nn.ParamStore()
    for layer, d in (("l1", n_in), ("l2", hidden)):
        store.add(f"{layer}.wx", _rand(rng, (d, 4 * hidden), 0.4))
        store.add(f"{layer}.uh", _rand(rng, (hidden, 4 * hidden), 0.4))
        store.add(f"{layer}.b", _rand(rng, (4 * hidden,), 0.1))
    xs = _rand(rng, (steps, batch, n_in), 0.8)

    def loss_fn(grad: bool) -> float:
        h1 = np.zeros((batch, hidden))
        c1 = np.zeros((batch, hidden))
        h2 = np.zeros((batch, hidden))
        c2 = np.zeros((batch, hidden))
        caches = []
        total = 0.0
        for t in range(steps):
            h1, c1, cache1 = nn.lstm_cell_forward(
                xs[t], h1, c1, store["l1.wx"], store["l1.uh"], store["l1.b"], hidden)
            h2, c2, cache2 = nn.lstm_cell_forward(
                h1, h2, c2, store["l2.wx"], store["l2.uh"], store["l2.b"], hidden)
            caches.append((cache1, cache2, h2))
            total += float(np.mean(h2 * h2))
        loss = total / steps
        if grad:
            dh1 = np.zeros((batch, hidden))
            dc1 = np.zeros((batch, hidden))
            dh2 = np.zeros((batch, hidden))
            dc2 = np.zeros((batch, hidden))
            denom = batch * hidden * steps
            for t in reversed(range(steps)):
                cache1, cache2, h2_t = caches[t]
                dh2_t = dh2 + 2.0 * h2_t / denom
                dx2, dh2, dc2, dwx, duh, db = nn.lstm_cell_backward(
                    dh2_t, dc2, cache2, store["l2.wx"], store["l2.uh"])
                store.add_grad("l2.wx", dwx)
                store.add_grad("l2.uh", duh)
                store.add_grad("l2.b", db)
                dh1_t = dh1 + dx2
                _, dh1, dc1, dwx, duh, db = nn.lstm_cell_backward(
                    dh1_t, dc1, cache1, store["l1.wx"], store["l1.uh"])
                store.add_grad("l1.wx", dwx)
                store.add_grad("l1.uh", duh)
                store.add_grad("l1.b", db)
        return loss

    return nn.grad_check(store, loss_fn)


def check_policy(seed: int = 0, steps: int = 8) -> float:
    """The composed policy unrolled through time: mean-square readout on
    the values plus a weighted log-likelihood of fixed action samples, so
    the gradient through the action distribution (means and log_std, the
    path the surrogate objective differentiates) is covered too."""
    policy = RecurrentPolicy(obs_dim=5, hidden_dim=10, act_dim=3,
                             seed=derive_seed(seed, "gradcheck.policy"))
    rng = stream(seed, "gradcheck.policy.data")
    obs = _rand(rng, (3, steps, 5), 0.7)
    raw = _rand(rng, (3, steps, 3), 0.9)
    weights = _rand(rng, (3, steps), 1.0)

    def loss_fn(grad: bool) -> float:
        log_std = policy.params["log_std"]
        var = np.exp(2.0 * log_std)
        mean_pre, values, caches = policy.unroll(obs)
        z = raw - mean_pre
        lp = np.sum(-0.5 * z * z / var - log_std - 0.5 * nn.LOG_2PI, axis=2)
        loss = float(np.mean(values * values) + np.mean(weights * lp))
        if grad:
            d_lp = weights / lp.size
            d_mean_pre = d_lp[:, :, None] * (z / var)
            policy.backward(caches, d_mean_pre, 2.0 * values / values.size)
            policy.params.grad("log_std")[...] += np.sum(
                d_lp[:, :, None] * (z * z / var - 1.0), axis=(0, 1))
        return loss

    return nn.grad_check(policy.params, loss_fn)


def check_bc(seed: int = 0) -> float:
    """The cloning objective on three episodes of different lengths, which
    also exercises the padding mask."""
    policy = RecurrentPolicy(obs_dim=6, hidden_dim=10, act_dim=3,
                             seed=derive_seed(seed, "gradcheck.bc"), role="victim")
    rng = stream(seed, "gradcheck.bc.data")
    episodes = []
    for i, length in enumerate((6, 9, 12)):
        episodes.append(Episode(
            obs=_rand(rng, (length, 6), 0.7),
            actions=np.tanh(_rand(rng, (length, 3), 1.0)),
            poisoned=False, trig_t=None, outcome="T", seed=i))

    return nn.grad_check(policy.params,
                         lambda grad: bc_loss(policy, episodes, grad=grad))


def run_all(seed: int = 0) -> list[tuple[str, float]]:
    return [
        ("mlp", check_mlp(seed)),
        ("lstm", check_lstm(seed)),
        ("policy", check_policy(seed)),
        ("bc", check_bc(seed)),
    ]
