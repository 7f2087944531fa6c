"""Dense/LSTM kernels with hand-written gradients.

Everything is float64 numpy. Forward functions return whatever their
backward needs as an explicit cache; backward functions return input grads
and parameter grads. There is no general autodiff here -- the architectures
in this package are fixed, and every gradient path is checked against
central finite differences (`grad_check`, exercised in the tests and the
`gradcheck` CLI command) instead of being trusted.

Gate order in the fused LSTM matrices is [input, forget, cell, output].
"""
from __future__ import annotations

import math

import numpy as np

from .errors import NumericError

LOG_2PI = math.log(2.0 * math.pi)


# ---------- parameter store ----------

class ParamStore:
    """Ordered name -> float64 array map with a parallel gradient slot."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.asarray(value, dtype=np.float64)
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        cur = self._params[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != cur.shape:
            raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {cur.shape}")
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def add_grad(self, name: str, g: np.ndarray) -> None:
        self._grads[name] += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def n_params(self) -> int:
        return sum(p.size for p in self._params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.copy())
        return out

    def global_grad_norm(self) -> float:
        total = 0.0
        for g in self._grads.values():
            total += float(np.sum(g * g))
        return math.sqrt(total)

    def check_finite(self) -> None:
        for name, p in self._params.items():
            if not np.all(np.isfinite(p)):
                raise NumericError(f"non-finite values in parameter {name!r}")


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is <= max_norm. Returns the
    pre-clip norm."""
    norm = store.global_grad_norm()
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for name in store.names():
            store.grad(name)[...] *= scale
    return norm


# ---------- optimizer ----------

class AdamState:
    """Adam with bias correction, applied in parameter insertion order."""

    def __init__(self, store: ParamStore, lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(store[n]) for n in store.names()}
        self._v = {n: np.zeros_like(store[n]) for n in store.names()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name in self.store.names():
            g = self.store.grad(name)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.store[name][...] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        self.store.check_finite()
        self.store.zero_grads()


# ---------- layers ----------

def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (B, n_in) -> (B, n_out)."""
    return x @ w + b


def affine_backward(dout, x, w):
    """Returns (dx, dw, db)."""
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def tanh_backward(dout, y):
    """y = tanh(pre); returns gradient w.r.t. pre."""
    return dout * (1.0 - y * y)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_cell_forward(x, h, c, wx, uh, b, hidden: int):
    """One LSTM step. x: (B, n_in), h/c: (B, H), wx: (n_in, 4H), uh: (H, 4H).

    Returns (h2, c2, cache).
    """
    a = x @ wx + h @ uh + b
    i = sigmoid(a[:, :hidden])
    f = sigmoid(a[:, hidden:2 * hidden])
    g = np.tanh(a[:, 2 * hidden:3 * hidden])
    o = sigmoid(a[:, 3 * hidden:])
    c2 = f * c + i * g
    tc2 = np.tanh(c2)
    h2 = o * tc2
    return h2, c2, (x, h, c, i, f, g, o, tc2)


def lstm_cell_backward(dh2, dc2, cache, wx, uh):
    """Backward through one LSTM step.

    dh2/dc2 are grads w.r.t. this step's outputs (dc2 carries the chain
    from step t+1). Returns (dx, dh, dc, dwx, duh, db).
    """
    x, h, c, i, f, g, o, tc2 = cache
    do = dh2 * tc2
    dc = dc2 + dh2 * o * (1.0 - tc2 * tc2)
    di = dc * g
    df = dc * c
    dg = dc * i
    dc_prev = dc * f
    da = np.concatenate(
        [
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ],
        axis=1,
    )
    dwx = x.T @ da
    duh = h.T @ da
    db = da.sum(axis=0)
    dx = da @ wx.T
    dh_prev = da @ uh.T
    return dx, dh_prev, dc_prev, dwx, duh, db


# ---------- diagonal gaussian ----------

def gaussian_logprob(mean, log_std, sample):
    """Log density of `sample` under N(mean, exp(log_std)^2), summed over
    the action dims. mean/sample: (B, D), log_std: (D,). Returns (B,)."""
    var = np.exp(2.0 * log_std)
    z = sample - mean
    return np.sum(-0.5 * z * z / var - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_logprob_dmean(mean, log_std, sample):
    """d logprob / d mean, shape (B, D)."""
    return (sample - mean) / np.exp(2.0 * log_std)


def gaussian_entropy(log_std) -> float:
    """Entropy of the diagonal gaussian, summed over dims."""
    return float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))


# ---------- finite-difference verification ----------

def grad_check(store: ParamStore, loss_fn, eps: float = 1e-5) -> float:
    """Compare analytic grads with central finite differences.

    `loss_fn(grad: bool) -> float` must populate `store` grads when called
    with grad=True and leave parameters untouched either way. Returns the
    max elementwise error |g_a - g_n| / max(|g_a|, |g_n|, 1e-2); the floor
    absorbs the ~1e-7 absolute noise central differences carry on an
    O(1) loss, so design losses to be O(1).
    """
    store.zero_grads()
    loss_fn(True)
    analytic = {n: store.grad(n).copy() for n in store.names()}
    store.zero_grads()

    worst = 0.0
    for name in store.names():
        p = store[name]
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = loss_fn(False)
            flat[idx] = orig - eps
            f_minus = loss_fn(False)
            flat[idx] = orig
            gn = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ga[idx] - gn) / max(abs(ga[idx]), abs(gn), 1e-2)
            if err > worst:
                worst = err
    return worst
