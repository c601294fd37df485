"""A small numpy neural stack: dense nets, an LSTM actor-critic, Adam and a replay ring.

Everything is float64 and deterministic given the generator passed at
construction. Parameters live in plain ``dict[str, ndarray]`` containers so
they serialize with :func:`mdtlab.rl.encode_array` and can be frozen by
clearing the writeable flag.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


# ------------------------------------------------------------------ dense

class DenseNet:
    """ReLU multilayer perceptron with a linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, zero: bool = False):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        rng = rng or np.random.default_rng(0)
        self.params = {}
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if zero:
                w = np.zeros((n_in, n_out))
            else:
                # He initialization for the ReLU layers
                w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
            self.params[f"W{i}"] = w
            self.params[f"b{i}"] = np.zeros(n_out)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def copy(self) -> "DenseNet":
        out = DenseNet.__new__(DenseNet)
        out.sizes = list(self.sizes)
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out

    def forward(self, x):
        return dense_forward(self, x)

    def backward(self, cache, dy):
        return dense_backward(self, cache, dy)


def dense_forward(net: DenseNet, x):
    """``(y, cache)``; ``x`` is a vector or a ``(batch, in)`` matrix."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    acts = [h]
    for i in range(net.n_layers):
        w, b = net.params[f"W{i}"], net.params[f"b{i}"]
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"layer {i}: input width {h.shape[1]} does not match weight rows {w.shape[0]}")
        z = h @ w + b
        h = np.maximum(z, 0.0) if i < net.n_layers - 1 else z
        acts.append(h)
    y = h[0] if single else h
    return y, (single, acts)


def dense_backward(net: DenseNet, cache, dy):
    """``(grads, dx)`` for an upstream gradient ``dy`` shaped like the output."""
    single, acts = cache
    g = np.asarray(dy, dtype=float)
    g = g[None, :] if single else g
    if g.shape != acts[-1].shape:
        raise ShapeError(f"layer {net.n_layers - 1}: output gradient shape {g.shape} != {acts[-1].shape}")
    grads = {}
    for i in reversed(range(net.n_layers)):
        if i < net.n_layers - 1:
            g = g * (acts[i + 1] > 0.0)
        grads[f"W{i}"] = acts[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ net.params[f"W{i}"].T
    dx = g[0] if single else g
    return grads, dx


# ------------------------------------------------------------------- Adam

class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of ``params``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array([float(self.t)])
        return out

    def load(self, arrays: dict) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"m.{k}"], dtype=float)
            self.v[k] = np.array(arrays[f"v.{k}"], dtype=float)
        self.t = int(arrays["t"][0])


def clip_by_global_norm(grads: dict, max_norm: float):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the raw norm."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def soft_update(target: dict, online: dict, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, in place."""
    for k, w in online.items():
        t = target[k]
        t *= 1.0 - tau
        t += tau * w


# ----------------------------------------------------------------- replay

class ReplayBuffer:
    """Fixed-capacity ring of ``(obs, action, reward, next_obs, done)``."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done) -> None:
        i = self.head
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = done
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        """Uniform draw of ``batch`` distinct filled slots; ``None`` when underfilled."""
        if self.size < batch:
            return None
        idx = rng.choice(self.size, size=batch, replace=False)
        return self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.done[idx]


# ------------------------------------------------------------------- LSTM

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LstmPolicyNet:
    """One LSTM layer with linear policy (logits) and value heads on the hidden state."""

    def __init__(self, n_in: int, hidden: int = 256, n_actions: int = 2,
                 rng: np.random.Generator | None = None, zero: bool = False):
        self.n_in, self.hidden, self.n_actions = n_in, hidden, n_actions
        rng = rng or np.random.default_rng(0)
        H = hidden

        def init(shape, scale):
            return np.zeros(shape) if zero else rng.normal(0.0, scale, size=shape)

        self.params = {
            "Wx": init((n_in, 4 * H), 1.0 / np.sqrt(n_in)),
            "Wh": init((H, 4 * H), 1.0 / np.sqrt(H)),
            "b": np.zeros(4 * H),
            "Wpi": init((H, n_actions), 0.01),
            "bpi": np.zeros(n_actions),
            "Wv": init((H, 1), 1.0 / np.sqrt(H)),
            "bv": np.zeros(1),
        }
        if not zero:
            # forget-gate bias starts open
            self.params["b"][H:2 * H] = 1.0

    def initial_state(self):
        return np.zeros(self.hidden), np.zeros(self.hidden)


def lstm_step(net: LstmPolicyNet, x, h, c):
    """One recurrence step: ``(h', c', logits, value, cache)``. Pure in its arguments."""
    p = net.params
    H = net.hidden
    x = np.asarray(x, dtype=float)
    if x.shape != (net.n_in,):
        raise ShapeError(f"lstm input shape {x.shape} != ({net.n_in},)")
    if h.shape != (H,) or c.shape != (H,):
        raise ShapeError(f"lstm state shapes {h.shape}, {c.shape} != ({H},)")
    z = x @ p["Wx"] + h @ p["Wh"] + p["b"]
    i = _sigmoid(z[:H])
    f = _sigmoid(z[H:2 * H])
    o = _sigmoid(z[2 * H:3 * H])
    g = np.tanh(z[3 * H:])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    h2 = o * tc
    logits = h2 @ p["Wpi"] + p["bpi"]
    value = float(h2 @ p["Wv"][:, 0] + p["bv"][0])
    cache = (x, h, c, i, f, o, g, tc, h2)
    return h2, c2, logits, value, cache


def lstm_backward(net: LstmPolicyNet, caches: list, dlogits, dvalues, dh_last=None, dc_last=None):
    """Backpropagation through time over a rollout of ``lstm_step`` caches.

    ``dlogits`` is ``(T, n_actions)`` and ``dvalues`` ``(T,)``: loss gradients
    with respect to each step's head outputs. Returns ``(grads, dh0, dc0)``.
    """
    p = net.params
    H = net.hidden
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dh_next = np.zeros(H) if dh_last is None else dh_last.copy()
    dc_next = np.zeros(H) if dc_last is None else dc_last.copy()
    wv = p["Wv"][:, 0]
    for t in reversed(range(len(caches))):
        x, h, c, i, f, o, g, tc, h2 = caches[t]
        dl = dlogits[t]
        dv = dvalues[t]
        grads["Wpi"] += np.outer(h2, dl)
        grads["bpi"] += dl
        grads["Wv"][:, 0] += h2 * dv
        grads["bv"][0] += dv
        dh = dh_next + p["Wpi"] @ dl + wv * dv
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c
        dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g * g)])
        grads["Wx"] += np.outer(x, dz)
        grads["Wh"] += np.outer(h, dz)
        grads["b"] += dz
        dh_next = p["Wh"] @ dz
        dc_next = dc * f
    return grads, dh_next, dc_next
